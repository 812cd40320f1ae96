//! Lowercasing, punctuation splitting and clitic formatting.
//!
//! Output follows the reference-corpus convention: every token is separated
//! by one space, punctuation stands alone, and apostrophe clitics become
//! their own token (`it's` -> `it 's`, `don't` -> `do 'nt`).

/// Splits `text` into normalized tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        split_chunk(chunk, &mut out);
    }
    out
}

/// Reference-style normalization. Idempotent.
pub fn normalize_output(text: &str) -> String {
    tokenize(text).join(" ")
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn split_chunk(chunk: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = chunk.chars().collect();
    let mut word = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if is_word_char(c) {
            word.push(c);
            i += 1;
            continue;
        }
        if c == '\'' || c == '’' {
            // letters following the apostrophe up to the next non-word char
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_alphabetic() {
                j += 1;
            }
            let tail: String = chars[i + 1..j].iter().collect();
            if !tail.is_empty() {
                if word.is_empty() {
                    // already split clitic such as `'s`
                    word.push('\'');
                    word.push_str(&tail);
                } else if tail == "t" && word.ends_with('n') && word.len() > 1 {
                    word.pop();
                    out.push(std::mem::take(&mut word));
                    word.push_str("'nt");
                } else {
                    out.push(std::mem::take(&mut word));
                    word.push('\'');
                    word.push_str(&tail);
                }
                i = j;
                continue;
            }
            flush(&mut word, out);
            out.push("'".to_string());
            i += 1;
            continue;
        }
        // keep separators inside numbers: 3.50, 1,000
        let prev_digit = word.chars().last().is_some_and(|p| p.is_ascii_digit());
        let next_digit = chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if (c == '.' || c == ',' || c == ':') && prev_digit && next_digit {
            word.push(c);
            i += 1;
            continue;
        }
        flush(&mut word, out);
        out.push(c.to_string());
        i += 1;
    }
    flush(&mut word, out);
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}
