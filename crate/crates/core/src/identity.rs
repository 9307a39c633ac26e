//! Identity provider and access control: MAC-signed bearer tokens and
//! default-deny authorization of broker topics and data-space categories.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::broker::topic::{match_filter, TopicFilter, TopicPath};
use crate::model::DataCategory;
use crate::time::{Millis, Timestamp};

type HmacSha256 = Hmac<Sha256>;

/// Environment variable holding the token signing secret in CLI/service mode.
pub const SECRET_ENV: &str = "IOUT_TOKEN_SECRET";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Producer,
    Consumer,
    Operator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub principal_id: String,
    pub org_id: String,
    pub roles: BTreeSet<Role>,
}

impl Principal {
    pub fn new(id: impl Into<String>, org: impl Into<String>, roles: &[Role]) -> Self {
        Principal {
            principal_id: id.into(),
            org_id: org.into(),
            roles: roles.iter().copied().collect(),
        }
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Publish,
    Subscribe,
    QueryPull,
    Ingest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrantScope {
    Topic(TopicFilter),
    Categories(BTreeSet<DataCategory>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub action: Action,
    #[serde(flatten)]
    pub scope: GrantScope,
}

impl Grant {
    pub fn topic(action: Action, filter: &str) -> Self {
        Grant {
            action,
            scope: GrantScope::Topic(TopicFilter::new(filter).expect("valid grant filter")),
        }
    }

    pub fn categories(action: Action, cats: &[DataCategory]) -> Self {
        Grant {
            action,
            scope: GrantScope::Categories(cats.iter().copied().collect()),
        }
    }

    /// Filters equivalent to this grant's scope on the core broker topic tree.
    fn scope_filters(&self) -> Vec<TopicFilter> {
        match &self.scope {
            GrantScope::Topic(f) => vec![f.clone()],
            GrantScope::Categories(cats) => cats.iter().map(|c| category_filter(*c)).collect(),
        }
    }
}

/// `data/<category>/#`
pub fn category_filter(c: DataCategory) -> TopicFilter {
    TopicFilter::new(format!("data/{}/#", c.slug())).expect("static filter")
}

/// `ingest/<org>/#`
pub fn ingest_filter(org: &str) -> Result<TopicFilter, crate::broker::topic::TopicError> {
    TopicFilter::new(format!("ingest/{org}/#"))
}

/// What an access check is asked about.
#[derive(Debug, Clone, Copy)]
pub enum Resource<'a> {
    Topic(&'a TopicPath),
    /// Subscription pattern; allowed only if a grant covers every topic it can match.
    Filter(&'a TopicFilter),
    Category(DataCategory),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(String),
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow)
    }
}

/// A verified principal together with the grants its token carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub principal: Principal,
    pub grants: Vec<Grant>,
}

impl Access {
    pub fn new(principal: Principal, grants: Vec<Grant>) -> Self {
        Access { principal, grants }
    }

    pub fn authorize(&self, action: Action, resource: Resource<'_>) -> Decision {
        authorize(&self.grants, action, resource)
    }

    /// True when some topic matched by `filter` could be authorized. Used to
    /// accept subscriptions whose deliveries are then gated per topic.
    pub fn may_overlap(&self, action: Action, filter: &TopicFilter) -> bool {
        self.grants
            .iter()
            .filter(|g| g.action == action)
            .flat_map(Grant::scope_filters)
            .any(|g| g.overlaps(filter))
    }
}

/// Default-deny authorization over a grant list.
pub fn authorize(grants: &[Grant], action: Action, resource: Resource<'_>) -> Decision {
    let mut any_action = false;
    for grant in grants.iter().filter(|g| g.action == action) {
        any_action = true;
        let covered = match (&grant.scope, resource) {
            (GrantScope::Categories(set), Resource::Category(c)) => set.contains(&c),
            (GrantScope::Topic(f), Resource::Category(c)) => f.subsumes(&category_filter(c)),
            (_, Resource::Topic(t)) => grant.scope_filters().iter().any(|f| match_filter(f, t)),
            (_, Resource::Filter(req)) => grant.scope_filters().iter().any(|f| f.subsumes(req)),
        };
        if covered {
            return Decision::Allow;
        }
    }
    if any_action {
        Decision::Deny(format!("no {action:?} grant covers {}", describe(resource)))
    } else {
        Decision::Deny(format!("no {action:?} grant"))
    }
}

fn describe(r: Resource<'_>) -> String {
    match r {
        Resource::Topic(t) => format!("topic {t}"),
        Resource::Filter(f) => format!("filter {f}"),
        Resource::Category(c) => format!("category {c}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentityError {
    #[error("unknown principal {0:?}")]
    UnknownPrincipal(String),
    #[error("grant {grant:?} exceeds the roles of {principal:?}")]
    GrantExceedsRole { principal: String, grant: Grant },
    #[error("token lifetime must be positive")]
    InvalidTtl,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("token signature does not verify")]
    BadSignature,
    #[error("token expired")]
    Expired,
    #[error("token is not a valid bearer credential")]
    Malformed,
}

/// Server secret used to MAC token bodies.
#[derive(Clone)]
pub struct SigningKey(Vec<u8>);

impl SigningKey {
    pub fn new(secret: impl AsRef<[u8]>) -> Self {
        SigningKey(secret.as_ref().to_vec())
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(SECRET_ENV).ok().filter(|s| !s.is_empty()).map(SigningKey::new)
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length")
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

#[derive(Serialize)]
struct TokenBody<'a> {
    token_id: &'a str,
    principal: &'a Principal,
    grants: &'a [Grant],
    issued_at: Timestamp,
    expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub token_id: String,
    pub principal: Principal,
    pub grants: Vec<Grant>,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    /// base64url HMAC-SHA256 over the canonical JSON body.
    pub signature: String,
}

impl Token {
    fn body(&self) -> Vec<u8> {
        serde_json::to_vec(&TokenBody {
            token_id: &self.token_id,
            principal: &self.principal,
            grants: &self.grants,
            issued_at: self.issued_at,
            expires_at: self.expires_at,
        })
        .expect("token body serializes")
    }

    fn sign(&mut self, key: &SigningKey) {
        let mut mac = key.mac();
        mac.update(&self.body());
        self.signature = URL_SAFE_NO_PAD.encode(mac.finalize().into_bytes());
    }

    /// Bearer form: base64url of the token JSON.
    pub fn to_bearer(&self) -> String {
        URL_SAFE_NO_PAD.encode(serde_json::to_vec(self).expect("token serializes"))
    }

    pub fn from_bearer(s: &str) -> Result<Token, AuthError> {
        let raw = URL_SAFE_NO_PAD
            .decode(s.trim())
            .map_err(|_| AuthError::Malformed)?;
        serde_json::from_slice(&raw).map_err(|_| AuthError::Malformed)
    }

    /// Checks signature and expiry; `skew` extends the expiry bound.
    pub fn verify_access(
        &self,
        now: Timestamp,
        key: &SigningKey,
        skew: Millis,
    ) -> Result<Access, AuthError> {
        let sig = URL_SAFE_NO_PAD
            .decode(&self.signature)
            .map_err(|_| AuthError::BadSignature)?;
        let mut mac = key.mac();
        mac.update(&self.body());
        mac.verify_slice(&sig).map_err(|_| AuthError::BadSignature)?;
        if self.expires_at <= self.issued_at {
            return Err(AuthError::BadSignature);
        }
        if now >= self.expires_at + skew {
            return Err(AuthError::Expired);
        }
        Ok(Access::new(self.principal.clone(), self.grants.clone()))
    }
}

/// Verifies a token and returns its principal. The expiry bound is exclusive.
pub fn verify(token: &Token, now: Timestamp, key: &SigningKey) -> Result<Principal, AuthError> {
    token
        .verify_access(now, key, Millis(0))
        .map(|a| a.principal)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrincipalStore {
    principals: BTreeMap<String, Principal>,
}

impl PrincipalStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Principal) {
        self.principals.insert(p.principal_id.clone(), p);
    }

    pub fn get(&self, id: &str) -> Option<&Principal> {
        self.principals.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Principal> {
        self.principals.values()
    }

    /// Loads a JSON array of principals.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let list: Vec<Principal> = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let mut store = PrincipalStore::new();
        for p in list {
            store.insert(p);
        }
        Ok(store)
    }
}

/// Whether `grant` lies in the grant space of at least one of the principal's roles.
fn role_allows(principal: &Principal, grant: &Grant) -> bool {
    principal.roles.iter().any(|role| match role {
        Role::Operator => true,
        Role::Producer => match (&grant.action, &grant.scope) {
            (Action::Publish | Action::Ingest, GrantScope::Topic(f)) => ingest_filter(&principal.org_id)
                .map(|own| own.subsumes(f))
                .unwrap_or(false),
            _ => false,
        },
        Role::Consumer => matches!(
            (&grant.action, &grant.scope),
            (Action::Subscribe, _) | (Action::QueryPull, GrantScope::Categories(_))
        ),
    })
}

pub fn issue_token(
    store: &PrincipalStore,
    principal_id: &str,
    grants: Vec<Grant>,
    ttl_s: i64,
    now: Timestamp,
    key: &SigningKey,
) -> Result<Token, IdentityError> {
    let principal = store
        .get(principal_id)
        .ok_or_else(|| IdentityError::UnknownPrincipal(principal_id.to_owned()))?;
    if ttl_s <= 0 {
        return Err(IdentityError::InvalidTtl);
    }
    if let Some(bad) = grants.iter().find(|g| !role_allows(principal, g)) {
        return Err(IdentityError::GrantExceedsRole {
            principal: principal_id.to_owned(),
            grant: bad.clone(),
        });
    }
    let expires_at = now + Millis::from_secs(ttl_s);
    let mut digest = Sha256::new();
    digest.update(principal_id.as_bytes());
    digest.update(now.millis().to_be_bytes());
    digest.update(serde_json::to_vec(&grants).expect("grants serialize"));
    let token_id = URL_SAFE_NO_PAD.encode(&digest.finalize()[..12]);
    let mut token = Token {
        token_id,
        principal: principal.clone(),
        grants,
        issued_at: now,
        expires_at,
        signature: String::new(),
    };
    token.sign(key);
    Ok(token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use DataCategory::*;

    fn store() -> PrincipalStore {
        let mut s = PrincipalStore::new();
        s.insert(Principal::new("prod7", "org7", &[Role::Producer]));
        s.insert(Principal::new("cons", "org9", &[Role::Consumer]));
        s
    }

    fn key() -> SigningKey {
        SigningKey::new("test-secret")
    }

    #[test]
    fn producer_ingest_for_own_org() {
        let t = issue_token(
            &store(),
            "prod7",
            vec![Grant::topic(Action::Ingest, "ingest/org7/#")],
            60,
            Timestamp(0),
            &key(),
        )
        .unwrap();
        assert_eq!(verify(&t, Timestamp(1), &key()).unwrap().principal_id, "prod7");
    }

    #[test]
    fn producer_cannot_ingest_for_other_org() {
        let err = issue_token(
            &store(),
            "prod7",
            vec![Grant::topic(Action::Ingest, "ingest/org8/#")],
            60,
            Timestamp(0),
            &key(),
        )
        .unwrap_err();
        assert!(matches!(err, IdentityError::GrantExceedsRole { .. }));
    }

    #[test]
    fn consumer_requesting_ingest_exceeds_role() {
        let err = issue_token(
            &store(),
            "cons",
            vec![Grant::topic(Action::Ingest, "ingest/org9/#")],
            60,
            Timestamp(0),
            &key(),
        )
        .unwrap_err();
        assert!(matches!(err, IdentityError::GrantExceedsRole { .. }));
    }

    #[test]
    fn zero_ttl_rejected() {
        assert_eq!(
            issue_token(&store(), "cons", vec![], 0, Timestamp(0), &key()),
            Err(IdentityError::InvalidTtl)
        );
        assert!(matches!(
            issue_token(&store(), "ghost", vec![], 10, Timestamp(0), &key()),
            Err(IdentityError::UnknownPrincipal(_))
        ));
    }

    #[test]
    fn tampered_token_fails_and_expiry_is_exclusive() {
        let t = issue_token(
            &store(),
            "cons",
            vec![Grant::categories(Action::QueryPull, &[OpenAccess])],
            60,
            Timestamp(0),
            &key(),
        )
        .unwrap();
        let mut altered = t.clone();
        altered.grants = vec![Grant::categories(Action::QueryPull, &[LegallyRestricted])];
        assert_eq!(verify(&altered, Timestamp(1), &key()), Err(AuthError::BadSignature));
        assert_eq!(verify(&t, Timestamp(1), &SigningKey::new("other")), Err(AuthError::BadSignature));
        assert_eq!(verify(&t, t.expires_at, &key()), Err(AuthError::Expired));
        assert!(verify(&t, Timestamp(t.expires_at.0 - 1), &key()).is_ok());
        // skew extends the bound
        assert!(t.verify_access(t.expires_at, &key(), Millis(30_000)).is_ok());
    }

    #[test]
    fn bearer_round_trip() {
        let t = issue_token(&store(), "cons", vec![], 60, Timestamp(0), &key()).unwrap();
        let back = Token::from_bearer(&t.to_bearer()).unwrap();
        assert_eq!(back, t);
        assert_eq!(Token::from_bearer("!!"), Err(AuthError::Malformed));
    }

    #[test]
    fn authorize_examples() {
        let grants = vec![Grant::topic(Action::Subscribe, "data/open_access/#")];
        let ok = TopicPath::new("data/open_access/org7/p1/temperature").unwrap();
        let no = TopicPath::new("data/legally_restricted/org8/p1/bathymetry").unwrap();
        assert!(authorize(&grants, Action::Subscribe, Resource::Topic(&ok)).is_allow());
        assert!(!authorize(&grants, Action::Subscribe, Resource::Topic(&no)).is_allow());

        let publish = vec![Grant::topic(Action::Publish, "ingest/org7/#")];
        let other = TopicPath::new("ingest/org8/p1").unwrap();
        assert!(!authorize(&publish, Action::Publish, Resource::Topic(&other)).is_allow());
    }

    #[test]
    fn empty_grants_deny_everything() {
        let t = TopicPath::new("a").unwrap();
        for action in [Action::Publish, Action::Subscribe, Action::QueryPull, Action::Ingest] {
            assert!(!authorize(&[], action, Resource::Topic(&t)).is_allow());
            for c in DataCategory::ALL {
                assert!(!authorize(&[], action, Resource::Category(c)).is_allow());
            }
        }
    }

    #[test]
    fn category_grants_are_symmetric_for_push_and_pull() {
        let sets: Vec<Vec<DataCategory>> = vec![
            vec![],
            vec![OpenAccess],
            vec![OpenAccess, BusinessCritical],
            DataCategory::ALL.to_vec(),
        ];
        for set in sets {
            let grants = vec![
                Grant::categories(Action::Subscribe, &set),
                Grant::categories(Action::QueryPull, &set),
            ];
            for c in DataCategory::ALL {
                let f = category_filter(c);
                let push = authorize(&grants, Action::Subscribe, Resource::Filter(&f)).is_allow();
                let pull = authorize(&grants, Action::QueryPull, Resource::Category(c)).is_allow();
                assert_eq!(push, pull, "{set:?} {c:?}");
                assert_eq!(push, set.contains(&c));
            }
        }
    }

    #[test]
    fn grant_json_shape() {
        let g = Grant::categories(Action::QueryPull, &[OpenAccess]);
        assert_eq!(
            serde_json::to_string(&g).unwrap(),
            r#"{"action":"query_pull","categories":["open_access"]}"#
        );
        let g: Grant = serde_json::from_str(r#"{"action":"subscribe","topic":"data/#"}"#).unwrap();
        assert_eq!(g, Grant::topic(Action::Subscribe, "data/#"));
    }
}
