//! Producer push: a bearer-authenticated batch is parsed, checked record by
//! record and republished one record per message on the ingestion tree.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::{RawRecord, UnparseablePayload, WireFormat};
use crate::broker::packet::QoS;
use crate::broker::topic::TopicPath;
use crate::identity::{Action, AuthError, Resource, SigningKey, Token};
use crate::time::{Millis, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReceipt {
    pub accepted: usize,
    pub rejected: Vec<RejectedRecord>,
}

/// A message bound for the ingestion broker.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestPublish {
    pub topic: TopicPath,
    pub payload: Vec<u8>,
    pub qos: QoS,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("not authorized: {0}")]
    NotAuthorized(String),
    #[error(transparent)]
    Unparseable(#[from] UnparseablePayload),
}

impl From<AuthError> for IngestError {
    fn from(e: AuthError) -> Self {
        IngestError::NotAuthorized(e.to_string())
    }
}

/// `ingest/<org>/<platform>`
pub fn ingest_topic(org_id: &str, platform_id: &str) -> Option<TopicPath> {
    TopicPath::from_levels(["ingest", org_id, platform_id]).ok()
}

/// Checks the fields the ingestion path itself relies on: the platform id
/// (for routing) and a parseable measurement time. Everything else is left
/// to the transform stage.
pub fn check_record(org_id: &str, rec: &RawRecord) -> Result<TopicPath, String> {
    let vocab = rec.source_format.vocabulary();
    let platform = rec
        .get(vocab.platform_id)
        .map(|s| s.to_string())
        .ok_or_else(|| format!("missing {}", vocab.platform_id))?;
    let topic = ingest_topic(org_id, &platform).ok_or_else(|| format!("bad {} {platform:?}", vocab.platform_id))?;
    if rec.get(vocab.sensor_id).is_none() {
        return Err(format!("missing {}", vocab.sensor_id));
    }
    match rec.get(vocab.measured_at).and_then(|s| s.as_text()) {
        Some(t) if Timestamp::parse_rfc3339(t).is_some() => Ok(topic),
        Some(t) => Err(format!("bad timestamp {t:?}")),
        None => Err(format!("missing {}", vocab.measured_at)),
    }
}

/// Encodes each record as a one-record batch in its own format.
pub fn to_publish(rec: &RawRecord, topic: TopicPath, qos: QoS) -> IngestPublish {
    IngestPublish {
        topic,
        payload: rec.source_format.encode(std::slice::from_ref(&rec.fields)),
        qos,
    }
}

#[derive(Debug, Clone)]
pub struct Pusher {
    pub key: SigningKey,
    pub skew: Millis,
    pub qos: QoS,
}

impl Pusher {
    pub fn new(key: SigningKey, skew: Millis, qos: QoS) -> Self {
        Pusher { key, skew, qos }
    }

    /// Handles one push of `payload` for `org_id`. Accepted records are never
    /// held back by rejected siblings.
    pub fn push_ingest(
        &self,
        bearer: &str,
        org_id: &str,
        format: WireFormat,
        payload: &[u8],
        now: Timestamp,
    ) -> Result<(IngestReceipt, Vec<IngestPublish>), IngestError> {
        let token = Token::from_bearer(bearer)?;
        let access = token.verify_access(now, &self.key, self.skew)?;
        if access.principal.org_id != org_id {
            return Err(IngestError::NotAuthorized(format!(
                "{} may not ingest for {org_id}",
                access.principal.principal_id
            )));
        }
        let records = format.parse(org_id, payload, now)?;
        let mut receipt = IngestReceipt::default();
        let mut out = Vec::new();
        for (index, rec) in records.iter().enumerate() {
            let topic = match check_record(org_id, rec) {
                Ok(t) => t,
                Err(reason) => {
                    receipt.rejected.push(RejectedRecord { index, reason });
                    continue;
                }
            };
            let d = access.authorize(Action::Ingest, Resource::Topic(&topic));
            if !d.is_allow() {
                receipt.rejected.push(RejectedRecord {
                    index,
                    reason: format!("{d:?}"),
                });
                continue;
            }
            receipt.accepted += 1;
            out.push(to_publish(rec, topic, self.qos));
        }
        Ok((receipt, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{ingest_filter, issue_token, Grant, Principal, PrincipalStore, Role};
    use crate::time::DEFAULT_EPOCH;

    fn setup() -> (Pusher, String) {
        let key = SigningKey::new("k");
        let mut store = PrincipalStore::new();
        store.insert(Principal::new("prod7", "org7", &[Role::Producer]));
        let grant = Grant::topic(Action::Ingest, ingest_filter("org7").unwrap().as_str());
        let tok = issue_token(&store, "prod7", vec![grant], 3600, DEFAULT_EPOCH, &key).unwrap();
        (Pusher::new(key, Millis(0), QoS::AtLeastOnce), tok.to_bearer())
    }

    fn batch(times: &[&str]) -> Vec<u8> {
        let recs: Vec<String> = times
            .iter()
            .enumerate()
            .map(|(i, t)| format!(r#"{{"sid":"s{i}","pid":"p1","t":"{t}","v":"9.8"}}"#))
            .collect();
        format!(r#"{{"records":[{}]}}"#, recs.join(",")).into_bytes()
    }

    #[test]
    fn valid_batch_all_accepted() {
        let (p, bearer) = setup();
        let body = batch(&["2024-01-01T00:00:00Z"; 3]);
        let (r, pubs) = p
            .push_ingest(&bearer, "org7", WireFormat::JsonV1, &body, DEFAULT_EPOCH)
            .unwrap();
        assert_eq!(r.accepted, 3);
        assert!(r.rejected.is_empty());
        assert_eq!(pubs.len(), 3);
        assert_eq!(pubs[0].topic.as_str(), "ingest/org7/p1");
        let back = WireFormat::JsonV1.parse("org7", &pubs[1].payload, DEFAULT_EPOCH).unwrap();
        assert_eq!(back[0].get("sid").unwrap().to_string(), "s1");
    }

    #[test]
    fn bad_timestamp_is_partial_reject() {
        let (p, bearer) = setup();
        let body = batch(&["2024-01-01T00:00:00Z", "yesterday", "2024-01-01T01:00:00Z"]);
        let (r, pubs) = p
            .push_ingest(&bearer, "org7", WireFormat::JsonV1, &body, DEFAULT_EPOCH)
            .unwrap();
        assert_eq!(r.accepted, 2);
        assert_eq!(r.rejected.len(), 1);
        assert_eq!(r.rejected[0].index, 1);
        assert_eq!(pubs.len(), 2);
    }

    #[test]
    fn other_org_not_authorized() {
        let (p, bearer) = setup();
        let body = batch(&["2024-01-01T00:00:00Z"]);
        assert!(matches!(
            p.push_ingest(&bearer, "org8", WireFormat::JsonV1, &body, DEFAULT_EPOCH),
            Err(IngestError::NotAuthorized(_))
        ));
    }

    #[test]
    fn garbage_is_unparseable() {
        let (p, bearer) = setup();
        assert!(matches!(
            p.push_ingest(&bearer, "org7", WireFormat::JsonV1, b"{\"records\":[", DEFAULT_EPOCH),
            Err(IngestError::Unparseable(_))
        ));
    }

    #[test]
    fn expired_token_refused() {
        let (p, bearer) = setup();
        let body = batch(&["2024-01-01T00:00:00Z"]);
        let late = DEFAULT_EPOCH + Millis::from_secs(3600);
        assert!(p.push_ingest(&bearer, "org7", WireFormat::JsonV1, &body, late).is_err());
    }
}
