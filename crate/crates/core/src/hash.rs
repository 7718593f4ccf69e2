use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Canonical form used for deduplication: trailing whitespace is stripped
/// from every line, line endings become `\n`, and the text ends with exactly
/// one newline (or is empty).
pub fn normalize_code(code: &str) -> String {
    let mut out = String::with_capacity(code.len() + 1);
    for line in code.lines() {
        out.push_str(line.trim_end());
        out.push('\n');
    }
    let kept = out.trim_end_matches('\n').len();
    out.truncate(kept);
    if !out.is_empty() {
        out.push('\n');
    }
    out
}

/// SHA-256 of the normalized code, hex encoded.
pub fn content_hash(code: &str) -> String {
    sha256_hex(normalize_code(code).as_bytes())
}
