use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = config_digest(&("x", 1));
        assert_eq!(a, config_digest(&("x", 1)));
        assert_ne!(a, config_digest(&("x", 2)));
        assert_eq!(a.len(), 64);
    }
}
