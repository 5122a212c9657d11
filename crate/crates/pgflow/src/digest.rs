//! Stable configuration digests: FNV-1a over the canonicalized key-value
//! text. Every output file embeds the digest of the config that produced it,
//! so identical configs are recognizably identical runs.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    format!("{h:016x}")
}

/// Canonicalize `key = value` pairs (sorted keys, single spacing) and digest.
pub fn digest_pairs<'a>(pairs: impl Iterator<Item = (&'a str, &'a str)>) -> String {
    let mut lines: Vec<String> =
        pairs.map(|(k, v)| format!("{}={}", k.trim(), v.trim())).collect();
    lines.sort();
    fnv1a_hex(lines.join("\n").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_order_insensitive_and_stable() {
        let a = digest_pairs([("b", "2"), ("a", "1")].into_iter());
        let b = digest_pairs([("a", "1"), ("b", "2")].into_iter());
        assert_eq!(a, b);
        let c = digest_pairs([("a", "1"), ("b", "3")].into_iter());
        assert_ne!(a, c);
        // frozen value so file formats stay recognizable across versions
        assert_eq!(fnv1a_hex(b"pgflow"), "f5eecac279fc76c0");
    }
}
