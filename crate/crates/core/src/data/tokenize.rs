/// Lowercases, splits on whitespace and detaches leading/trailing ASCII
/// punctuation as separate tokens. Word-internal punctuation (`i'd`, `5:30`)
/// stays attached.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let start = chars.iter().take_while(|c| c.is_ascii_punctuation()).count();
        if start == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let end = chars.len() - chars.iter().rev().take_while(|c| c.is_ascii_punctuation()).count();
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        out.push(chars[start..end].iter().collect());
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out
}
