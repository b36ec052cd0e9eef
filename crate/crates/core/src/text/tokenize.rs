/// Lowercases, splits on whitespace, detaches punctuation and a trailing
/// possessive `'s`. Apostrophes inside a word ("don't") are kept.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.to_lowercase().chars().collect();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_alphanumeric() {
                let mut j = i + 1;
                while j < chars.len()
                    && (chars[j].is_alphanumeric()
                        || (chars[j] == '\'' && j + 1 < chars.len() && chars[j + 1].is_alphanumeric()))
                {
                    j += 1;
                }
                let word: String = chars[i..j].iter().collect();
                match word.strip_suffix("'s") {
                    Some(stem) if !stem.is_empty() => {
                        out.push(stem.to_string());
                        out.push("'s".to_string());
                    }
                    _ => out.push(word),
                }
                i = j;
            } else {
                out.push(chars[i].to_string());
                i += 1;
            }
        }
    }
    out
}
