//! Tokenization and feature hashing for the text encoder.

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `std`'s hasher.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Hash bucket for every token of `text`, in order (repeats kept).
pub fn token_buckets(text: &str, buckets: usize) -> Vec<usize> {
    tokenize(text)
        .iter()
        .map(|t| (fnv1a(t.as_bytes()) % buckets as u64) as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_and_lowercases() {
        assert_eq!(tokenize("Hello, World!  it's 42"), ["hello", "world", "it", "s", "42"]);
        assert_eq!(tokenize("a → b"), ["a", "b"]);
        assert!(tokenize("  ,;→ ").is_empty());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn buckets_in_range() {
        for b in token_buckets("the quick brown fox jumps", 17) {
            assert!(b < 17);
        }
    }
}
