//! Shared word-level normalization: lowercase, punctuation stripped, whitespace split.

/// Lowercased words with every non-alphanumeric character treated as a separator.
pub fn words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// `words(text)` joined by single spaces.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}
