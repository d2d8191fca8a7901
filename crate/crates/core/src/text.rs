//! Word-level tokenization and a hashed input vocabulary for the toy encoder.

use sha2::{Digest, Sha256};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const COLON: &str = ":";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const COLON_ID: u32 = 4;
const RESERVED_IDS: u32 = 5;

/// Alphanumeric runs, case preserved.
pub fn words(text: &str) -> impl Iterator<Item = &str> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

/// Stable 64-bit digest of a string (first 8 bytes of SHA-256).
pub fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Maps tokens to ids by hashing into a fixed number of buckets, so no
/// vocabulary file has to travel with a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedVocab {
    size: u32,
}

impl HashedVocab {
    pub fn new(size: usize) -> Self {
        assert!(size > RESERVED_IDS as usize, "vocabulary too small");
        HashedVocab { size: size as u32 }
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn id(&self, token: &str) -> u32 {
        match token {
            CLS => CLS_ID,
            SEP => SEP_ID,
            COLON => COLON_ID,
            "" => UNK_ID,
            w => {
                let folded = w.to_lowercase();
                RESERVED_IDS + (stable_hash(&folded) % u64::from(self.size - RESERVED_IDS)) as u32
            }
        }
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_alphanumeric_runs() {
        let w: Vec<&str> = words("Invasion of the host-organism, by 2 microbes.").collect();
        assert_eq!(w, ["Invasion", "of", "the", "host", "organism", "by", "2", "microbes"]);
    }

    #[test]
    fn hashed_ids_are_stable_and_in_range() {
        let v = HashedVocab::new(64);
        assert_eq!(v.id(CLS), CLS_ID);
        assert_eq!(v.id("virus"), v.id("Virus"));
        for w in ["a", "b", "virus", "covid", "zzz"] {
            let id = v.id(w);
            assert!((RESERVED_IDS..64).contains(&id));
        }
    }
}
