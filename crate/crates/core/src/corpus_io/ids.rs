use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Join key of a sentence across runs, subjects and corpus: `<article>:<index>`.
///
/// Ordering is by article name, then by numeric index, so `a:2 < a:10`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SentenceId {
    article: String,
    index: u32,
}

impl SentenceId {
    pub fn new(article: impl Into<String>, index: u32) -> Result<Self, Error> {
        let article = article.into();
        if article.is_empty() || article.contains(':') || article.contains('/') {
            return Err(Error::BadSentenceId(format!("{article}:{index}")));
        }
        Ok(Self { article, index })
    }

    pub fn article(&self) -> &str {
        &self.article
    }

    pub fn index(&self) -> u32 {
        self.index
    }
}

impl FromStr for SentenceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (article, index) = s.rsplit_once(':').ok_or_else(|| Error::BadSentenceId(s.into()))?;
        let index = index.parse::<u32>().map_err(|_| Error::BadSentenceId(s.into()))?;
        if index.to_string().len() != s.len() - article.len() - 1 {
            // reject "a:01"; the textual form must be canonical for byte-stable output
            return Err(Error::BadSentenceId(s.into()));
        }
        SentenceId::new(article, index).map_err(|_| Error::BadSentenceId(s.into()))
    }
}

impl fmt::Display for SentenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.article, self.index)
    }
}

impl Ord for SentenceId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.article.cmp(&other.article).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for SentenceId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for SentenceId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SentenceId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_ordering() {
        let a: SentenceId = "mars:2".parse().unwrap();
        let b: SentenceId = "mars:10".parse().unwrap();
        let c: SentenceId = "venus:0".parse().unwrap();
        assert!(a < b && b < c);
        assert_eq!(b.to_string(), "mars:10");
    }

    #[test]
    fn malformed_ids() {
        for bad in ["mars", "mars:x", ":3", "mars:-1", "mars:03", "a/b:1"] {
            assert!(bad.parse::<SentenceId>().is_err(), "{bad}");
        }
    }
}
