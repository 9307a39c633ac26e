//! MQTT 3.1.1 topic names and filters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("topic longer than 65535 bytes")]
    TooLong,
    #[error("topic contains NUL")]
    Nul,
    #[error("wildcard in topic name")]
    WildcardInName,
    #[error("'+' must occupy a whole level")]
    PartialSingleWildcard,
    #[error("'#' must be the last level and occupy it alone")]
    MisplacedMultiWildcard,
}

fn check_common(s: &str) -> Result<(), TopicError> {
    if s.is_empty() {
        return Err(TopicError::Empty);
    }
    if s.len() > u16::MAX as usize {
        return Err(TopicError::TooLong);
    }
    if s.contains('\0') {
        return Err(TopicError::Nul);
    }
    Ok(())
}

/// Concrete topic a message is published on. Never contains wildcards.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicPath(String);

impl TopicPath {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        check_common(&s)?;
        if s.contains(['+', '#']) {
            return Err(TopicError::WildcardInName);
        }
        Ok(TopicPath(s))
    }

    /// Joins already-validated levels.
    pub fn from_levels<I, S>(levels: I) -> Result<Self, TopicError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let joined = levels
            .into_iter()
            .map(|l| l.as_ref().to_owned())
            .collect::<Vec<_>>()
            .join("/");
        TopicPath::new(joined)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    pub fn level(&self, idx: usize) -> Option<&str> {
        self.levels().nth(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Level {
    Literal(String),
    /// `+`
    Single,
    /// `#`
    Multi,
}

/// Subscription pattern: `+` matches one level, a trailing `#` matches the
/// parent level and any number of children.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicFilter {
    raw: String,
    levels: Vec<Level>,
}

impl TopicFilter {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let raw = s.into();
        check_common(&raw)?;
        let parts: Vec<&str> = raw.split('/').collect();
        let mut levels = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let level = match *part {
                "+" => Level::Single,
                "#" if i + 1 == parts.len() => Level::Multi,
                "#" => return Err(TopicError::MisplacedMultiWildcard),
                p if p.contains('#') => return Err(TopicError::MisplacedMultiWildcard),
                p if p.contains('+') => return Err(TopicError::PartialSingleWildcard),
                p => Level::Literal(p.to_owned()),
            };
            levels.push(level);
        }
        Ok(TopicFilter { raw, levels })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn has_wildcards(&self) -> bool {
        self.levels.iter().any(|l| !matches!(l, Level::Literal(_)))
    }

    pub fn matches(&self, topic: &TopicPath) -> bool {
        match_filter(self, topic)
    }

    /// True when every topic matched by `other` is also matched by `self`.
    pub fn subsumes(&self, other: &TopicFilter) -> bool {
        let mut mine = self.levels.iter();
        let mut theirs = other.levels.iter();
        loop {
            match (mine.next(), theirs.next()) {
                (Some(Level::Multi), _) => return true,
                (None, None) => return true,
                (None, Some(_)) => return false,
                // `a/#` matches `a` but `a` does not match `a/x`
                (Some(_), None) => return false,
                (Some(Level::Single), Some(Level::Multi)) => return false,
                (Some(Level::Single), Some(_)) => {}
                (Some(Level::Literal(_)), Some(Level::Single | Level::Multi)) => return false,
                (Some(Level::Literal(a)), Some(Level::Literal(b))) => {
                    if a != b {
                        return false;
                    }
                }
            }
        }
    }

    /// True when at least one topic is matched by both filters.
    pub fn overlaps(&self, other: &TopicFilter) -> bool {
        let (a, b) = (&self.levels, &other.levels);
        let mut i = 0;
        loop {
            match (a.get(i), b.get(i)) {
                (Some(Level::Multi), _) | (_, Some(Level::Multi)) => return true,
                (None, None) => return true,
                (None, Some(_)) => return b.len() == i + 1 && b[i] == Level::Multi,
                (Some(_), None) => return a.len() == i + 1 && a[i] == Level::Multi,
                (Some(Level::Literal(x)), Some(Level::Literal(y))) if x != y => return false,
                _ => {}
            }
            i += 1;
        }
    }
}

/// MQTT 3.1.1 matching. Wildcard-leading filters never match `$`-prefixed topics.
pub fn match_filter(filter: &TopicFilter, topic: &TopicPath) -> bool {
    if topic.as_str().starts_with('$')
        && matches!(filter.levels.first(), Some(Level::Single | Level::Multi))
    {
        return false;
    }
    let mut levels = topic.levels();
    for f in &filter.levels {
        match f {
            Level::Multi => return true,
            Level::Single => {
                if levels.next().is_none() {
                    return false;
                }
            }
            Level::Literal(lit) => match levels.next() {
                Some(l) if l == lit => {}
                _ => return false,
            },
        }
    }
    levels.next().is_none()
}

macro_rules! string_like {
    ($ty:ty) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = TopicError;
            fn from_str(s: &str) -> Result<Self, TopicError> {
                <$ty>::new(s)
            }
        }

        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                <$ty>::new(s).map_err(serde::de::Error::custom)
            }
        }
    };
}

string_like!(TopicPath);
string_like!(TopicFilter);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f(s: &str) -> TopicFilter {
        TopicFilter::new(s).unwrap()
    }
    fn t(s: &str) -> TopicPath {
        TopicPath::new(s).unwrap()
    }

    #[test]
    fn wildcard_examples() {
        assert!(match_filter(&f("data/+/org7/#"), &t("data/open/org7/p1/temp")));
        assert!(!match_filter(&f("data/open"), &t("data/open/x")));
        assert!(match_filter(&f("#"), &t("anything/at/all")));
        assert!(match_filter(&f("sport/#"), &t("sport")));
        assert!(match_filter(&f("+/+"), &t("/finance")));
        assert!(!match_filter(&f("+"), &t("/finance")));
        assert!(!match_filter(&f("#"), &t("$SYS/uptime")));
        assert!(match_filter(&f("$SYS/#"), &t("$SYS/uptime")));
        assert!(match_filter(&f("a//b"), &t("a//b")));
    }

    #[test]
    fn filter_syntax() {
        assert_eq!(TopicFilter::new("a/#/b"), Err(TopicError::MisplacedMultiWildcard));
        assert_eq!(TopicFilter::new("a/b#"), Err(TopicError::MisplacedMultiWildcard));
        assert_eq!(TopicFilter::new("a/b+"), Err(TopicError::PartialSingleWildcard));
        assert_eq!(TopicFilter::new(""), Err(TopicError::Empty));
        assert_eq!(TopicPath::new("a/+"), Err(TopicError::WildcardInName));
    }

    #[test]
    fn subsumption() {
        assert!(f("data/open_access/#").subsumes(&f("data/open_access/org7/+")));
        assert!(f("data/#").subsumes(&f("data")));
        assert!(!f("data/open_access/#").subsumes(&f("data/#")));
        assert!(!f("data/+/x").subsumes(&f("data/#")));
        assert!(f("+/+").subsumes(&f("a/b")));
    }

    #[test]
    fn overlap() {
        assert!(f("#").overlaps(&f("data/open_access/#")));
        assert!(f("data/+/org7").overlaps(&f("data/open_access/+")));
        assert!(!f("data/open_access/#").overlaps(&f("data/legally_restricted/#")));
        assert!(f("a").overlaps(&f("a/#")));
        assert!(!f("a").overlaps(&f("a/+")));
    }

    fn level() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["a", "b", "c", ""]).prop_map(str::to_owned)
    }

    fn topic() -> impl Strategy<Value = TopicPath> {
        prop::collection::vec(level(), 1..5)
            .prop_filter_map("non-empty", |ls| TopicPath::new(ls.join("/")).ok())
    }

    fn filter() -> impl Strategy<Value = TopicFilter> {
        (
            prop::collection::vec(
                prop_oneof![level(), Just("+".to_owned())],
                1..5,
            ),
            any::<bool>(),
        )
            .prop_map(|(mut ls, multi)| {
                if multi {
                    ls.push("#".into());
                }
                ls
            })
            .prop_filter_map("non-empty", |ls| TopicFilter::new(ls.join("/")).ok())
    }

    proptest! {
        // if a subsumes b then everything b matches, a matches
        #[test]
        fn subsumption_is_sound(a in filter(), b in filter(), tp in topic()) {
            if a.subsumes(&b) && match_filter(&b, &tp) {
                prop_assert!(match_filter(&a, &tp));
            }
        }

        #[test]
        fn overlap_is_complete(a in filter(), b in filter(), tp in topic()) {
            if match_filter(&a, &tp) && match_filter(&b, &tp) {
                prop_assert!(a.overlaps(&b));
            }
        }

        #[test]
        fn literal_filter_matches_only_itself(a in topic(), b in topic()) {
            let fa = TopicFilter::new(a.as_str()).unwrap();
            prop_assert_eq!(match_filter(&fa, &b), a == b);
        }
    }
}
