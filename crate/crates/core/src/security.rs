//! Identity, challenge-response authentication, network authenticity, access rules
//! and the hash-chained audit trail.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};

use hmac::{Hmac, KeyInit, Mac};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kernel::SimTime;

type HmacSha256 = Hmac<Sha256>;

pub const HASH_ALGORITHM: &str = "sha256";
pub const GENESIS_HASH: [u8; 32] = [0u8; 32];
pub const DEFAULT_SESSION_LIFETIME_S: f64 = 3600.0;
const TEXT_MAGIC: &str = "#flexicell-audit v1";
const BINARY_MAGIC: &[u8; 8] = b"FCAUDIT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CredentialKind {
    PhysicalSim,
    VirtualSim,
    Certificate,
    EapExternal,
}

impl CredentialKind {
    pub fn is_sim(&self) -> bool {
        matches!(self, CredentialKind::PhysicalSim | CredentialKind::VirtualSim)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub kind: CredentialKind,
    pub subscriber: String,
    /// 128-bit key as hex for SIM kinds, public-key fingerprint otherwise.
    pub secret: String,
    #[serde(default)]
    pub sequence_counter: u64,
}

impl Credential {
    pub fn sim(subscriber: &str, key: [u8; 16]) -> Self {
        Self {
            kind: CredentialKind::PhysicalSim,
            subscriber: subscriber.into(),
            secret: hex::encode(key),
            sequence_counter: 0,
        }
    }

    pub fn key_bytes(&self) -> Vec<u8> {
        hex::decode(&self.secret).unwrap_or_else(|_| self.secret.as_bytes().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AuthError {
    #[error("response does not match the subscriber key")]
    KeyMismatch,
    #[error("sequence {sqn} not above counter {counter}")]
    ReplayDetected { sqn: u64, counter: u64 },
    #[error("unknown subscriber `{0}`")]
    UnknownSubscriber(String),
    #[error("certificate fingerprint not in trust store")]
    UntrustedCertificate,
    #[error("session expired")]
    ExpiredSession,
    #[error("cell token invalid")]
    InvalidToken,
    #[error("subscriber `{0}` registered twice")]
    DuplicateSubscriber(String),
}

impl AuthError {
    pub fn code(&self) -> &'static str {
        match self {
            AuthError::KeyMismatch => "key_mismatch",
            AuthError::ReplayDetected { .. } => "replay_detected",
            AuthError::UnknownSubscriber(_) => "unknown_subscriber",
            AuthError::UntrustedCertificate => "untrusted_certificate",
            AuthError::ExpiredSession => "expired_session",
            AuthError::InvalidToken => "invalid_token",
            AuthError::DuplicateSubscriber(_) => "duplicate_subscriber",
        }
    }
}

pub fn mac(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut m = <HmacSha256 as KeyInit>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(data);
    m.finalize().into_bytes().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub rand: [u8; 16],
    pub sqn: u64,
}

/// Response a SIM computes: MAC(key, rand || sqn).
pub fn aka_response(key: &[u8], challenge: &Challenge) -> [u8; 32] {
    let mut data = challenge.rand.to_vec();
    data.extend_from_slice(&challenge.sqn.to_be_bytes());
    mac(key, &data)
}

/// What a device presents to the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthProof {
    Response([u8; 32]),
    Fingerprint(String),
}

pub fn device_proof(cred: &Credential, challenge: &Challenge) -> AuthProof {
    if cred.kind.is_sim() {
        AuthProof::Response(aka_response(&cred.key_bytes(), challenge))
    } else {
        AuthProof::Fingerprint(cred.secret.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub device: String,
    pub subscriber: String,
    pub issued: SimTime,
    pub expiry: SimTime,
    /// Stand-in for derived key material.
    pub key_id: String,
}

impl Session {
    pub fn is_valid(&self, now: SimTime) -> bool {
        now < self.expiry
    }
}

/// Network-side subscriber database and trust store.
#[derive(Debug, Clone, Default)]
pub struct AuthCenter {
    subscribers: BTreeMap<String, Credential>,
    trust_store: BTreeSet<String>,
    pub session_lifetime: SimTime,
}

impl AuthCenter {
    pub fn new() -> Self {
        Self { session_lifetime: SimTime::from_secs(DEFAULT_SESSION_LIFETIME_S), ..Default::default() }
    }

    pub fn register(&mut self, cred: Credential) -> Result<(), AuthError> {
        if self.subscribers.contains_key(&cred.subscriber) {
            return Err(AuthError::DuplicateSubscriber(cred.subscriber));
        }
        self.subscribers.insert(cred.subscriber.clone(), cred);
        Ok(())
    }

    pub fn trust(&mut self, fingerprint: &str) {
        self.trust_store.insert(fingerprint.to_string());
    }

    pub fn counter(&self, subscriber: &str) -> Option<u64> {
        self.subscribers.get(subscriber).map(|c| c.sequence_counter)
    }

    /// Fresh challenge with the next expected sequence number.
    pub fn challenge<R: Rng + ?Sized>(&self, subscriber: &str, rng: &mut R) -> Challenge {
        let sqn = self.counter(subscriber).unwrap_or(0) + 1;
        Challenge { rand: rng.random(), sqn }
    }

    /// Check a proof against the stored credential; the counter advances only on success.
    pub fn verify(
        &mut self,
        device: &str,
        subscriber: &str,
        challenge: &Challenge,
        proof: &AuthProof,
        now: SimTime,
    ) -> Result<Session, AuthError> {
        let stored = self
            .subscribers
            .get_mut(subscriber)
            .ok_or_else(|| AuthError::UnknownSubscriber(subscriber.to_string()))?;
        if stored.kind.is_sim() {
            let AuthProof::Response(res) = proof else { return Err(AuthError::KeyMismatch) };
            let expected = aka_response(&stored.key_bytes(), challenge);
            if *res != expected {
                return Err(AuthError::KeyMismatch);
            }
            if challenge.sqn <= stored.sequence_counter {
                return Err(AuthError::ReplayDetected { sqn: challenge.sqn, counter: stored.sequence_counter });
            }
            stored.sequence_counter = challenge.sqn;
        } else {
            let AuthProof::Fingerprint(fp) = proof else { return Err(AuthError::UntrustedCertificate) };
            if !self.trust_store.contains(fp) {
                return Err(AuthError::UntrustedCertificate);
            }
        }
        let key_id = hex::encode(&mac(subscriber.as_bytes(), &challenge.rand)[..8]);
        Ok(Session {
            device: device.to_string(),
            subscriber: subscriber.to_string(),
            issued: now,
            expiry: now + self.session_lifetime,
            key_id,
        })
    }
}

/// Full exchange: the device answers `challenge` with its own credential.
pub fn authenticate(
    device: &str,
    device_cred: &Credential,
    network: &mut AuthCenter,
    challenge: &Challenge,
    now: SimTime,
) -> Result<Session, AuthError> {
    let proof = device_proof(device_cred, challenge);
    network.verify(device, &device_cred.subscriber, challenge, &proof, now)
}

/// Plant trust anchor that signs cell identities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustAnchor {
    secret: Vec<u8>,
}

impl TrustAnchor {
    pub fn new(secret: &[u8]) -> Self {
        Self { secret: secret.to_vec() }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(&Sha256::digest(format!("trust-anchor/{seed}").as_bytes()))
    }

    pub fn issue(&self, cell: &str) -> String {
        hex::encode(mac(&self.secret, cell.as_bytes()))
    }
}

pub fn verify_network(cell: &str, token: &str, anchor: &TrustAnchor) -> Result<(), AuthError> {
    if anchor.issue(cell) == token {
        Ok(())
    } else {
        Err(AuthError::InvalidToken)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessAction {
    Attach,
    Publish,
    Subscribe,
    JoinSlice,
    Configure,
}

/// Object pattern matching every slice the subject belongs to.
pub const MEMBER_SLICE: &str = "$member";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRule {
    /// Device kind or `*`.
    pub subject: String,
    pub action: AccessAction,
    /// Object id, [`MEMBER_SLICE`] or `*`.
    pub object: String,
    #[serde(default = "yes")]
    pub allow: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessPolicy {
    pub rules: Vec<AccessRule>,
}

impl AccessPolicy {
    /// Explicit deny beats allow; nothing matching means deny.
    pub fn authorize(
        &self,
        session: &Session,
        now: SimTime,
        subject_kind: &str,
        action: AccessAction,
        object: &str,
        is_member: bool,
    ) -> Result<Decision, AuthError> {
        if !session.is_valid(now) {
            return Err(AuthError::ExpiredSession);
        }
        let mut allowed = false;
        for r in &self.rules {
            let subject_ok = r.subject == "*" || r.subject == subject_kind;
            let object_ok = r.object == "*" || r.object == object || (r.object == MEMBER_SLICE && is_member);
            if subject_ok && object_ok && r.action == action {
                if !r.allow {
                    return Ok(Decision::Deny);
                }
                allowed = true;
            }
        }
        Ok(if allowed { Decision::Allow } else { Decision::Deny })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub index: u64,
    pub timestamp: SimTime,
    pub actor: String,
    pub action: String,
    pub object: String,
    pub outcome: String,
    pub prev_hash: String,
    pub hash: String,
}

pub fn record_hash(
    index: u64,
    timestamp: SimTime,
    actor: &str,
    action: &str,
    object: &str,
    outcome: &str,
    prev_hash: &[u8],
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(index.to_be_bytes());
    h.update(timestamp.as_micros().to_be_bytes());
    for field in [actor.as_bytes(), action.as_bytes(), object.as_bytes(), outcome.as_bytes(), prev_hash] {
        h.update((field.len() as u64).to_be_bytes());
        h.update(field);
    }
    h.finalize().into()
}

impl AuditRecord {
    pub fn expected_hash(&self) -> String {
        let prev = hex::decode(&self.prev_hash).unwrap_or_else(|_| self.prev_hash.as_bytes().to_vec());
        hex::encode(record_hash(
            self.index,
            self.timestamp,
            &self.actor,
            &self.action,
            &self.object,
            &self.outcome,
            &prev,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AuditImportError {
    #[error("bad or unsupported header")]
    Header,
    #[error("record {index} is malformed")]
    Malformed { index: usize },
}

impl AuditImportError {
    /// Record position the failure is attributed to, if any.
    pub fn index(&self) -> Option<usize> {
        match self {
            AuditImportError::Header => None,
            AuditImportError::Malformed { index } => Some(*index),
        }
    }
}

/// Append-only hash-chained log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<AuditRecord>) -> Self {
        Self { records }
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn head(&self) -> String {
        self.records.last().map(|r| r.hash.clone()).unwrap_or_else(|| hex::encode(GENESIS_HASH))
    }

    pub fn append(&mut self, timestamp: SimTime, actor: &str, action: &str, object: &str, outcome: &str) -> &AuditRecord {
        let index = self.records.len() as u64;
        let prev = self.records.last().map(|r| hex::decode(&r.hash).expect("own hashes are hex")).unwrap_or(GENESIS_HASH.to_vec());
        let hash = record_hash(index, timestamp, actor, action, object, outcome, &prev);
        self.records.push(AuditRecord {
            index,
            timestamp,
            actor: actor.into(),
            action: action.into(),
            object: object.into(),
            outcome: outcome.into(),
            prev_hash: hex::encode(prev),
            hash: hex::encode(hash),
        });
        self.records.last().unwrap()
    }

    /// Ok, or the index of the first record whose link or hash does not check out.
    pub fn verify(&self) -> Result<(), usize> {
        verify_chain(&self.records)
    }

    /// Header line naming the hash, then one canonical JSON record per line.
    pub fn export_text(&self) -> String {
        let mut out = format!("{TEXT_MAGIC} hash={HASH_ALGORITHM}\n");
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses strictly: every line must be the canonical encoding of its record.
    pub fn import_text(text: &str) -> Result<Self, AuditImportError> {
        let (header, body) = text.split_once('\n').ok_or(AuditImportError::Header)?;
        if header != format!("{TEXT_MAGIC} hash={HASH_ALGORITHM}") {
            return Err(AuditImportError::Header);
        }
        let mut records = Vec::new();
        let mut rest = body;
        while !rest.is_empty() {
            let index = records.len();
            let (line, tail) = rest.split_once('\n').ok_or(AuditImportError::Malformed { index })?;
            let r: AuditRecord = serde_json::from_str(line).map_err(|_| AuditImportError::Malformed { index })?;
            if serde_json::to_string(&r).ok().as_deref() != Some(line) {
                return Err(AuditImportError::Malformed { index });
            }
            records.push(r);
            rest = tail;
        }
        Ok(Self { records })
    }

    /// `FCAUDIT1`, u16 algorithm-name length and name, u64 record count, then per record
    /// a u32 length followed by the length-prefixed fields. Integers are big-endian.
    pub fn export_binary(&self) -> Vec<u8> {
        let mut out = BINARY_MAGIC.to_vec();
        out.extend_from_slice(&(HASH_ALGORITHM.len() as u16).to_be_bytes());
        out.extend_from_slice(HASH_ALGORITHM.as_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_be_bytes());
        for r in &self.records {
            let mut body = Vec::new();
            body.extend_from_slice(&r.index.to_be_bytes());
            body.extend_from_slice(&r.timestamp.as_micros().to_be_bytes());
            for s in [&r.actor, &r.action, &r.object, &r.outcome] {
                body.extend_from_slice(&(s.len() as u32).to_be_bytes());
                body.extend_from_slice(s.as_bytes());
            }
            for h in [&r.prev_hash, &r.hash] {
                let bytes = hex::decode(h).unwrap_or_default();
                body.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
                body.extend_from_slice(&bytes);
            }
            out.extend_from_slice(&(body.len() as u32).to_be_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn import_binary(bytes: &[u8]) -> Result<Self, AuditImportError> {
        let mut cur = io::Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| AuditImportError::Header)?;
        let alg_len = read_u16(&mut cur).ok_or(AuditImportError::Header)? as usize;
        let alg = read_bytes(&mut cur, alg_len).ok_or(AuditImportError::Header)?;
        if &magic != BINARY_MAGIC || alg != HASH_ALGORITHM.as_bytes() {
            return Err(AuditImportError::Header);
        }
        let count = read_u64(&mut cur).ok_or(AuditImportError::Header)?;
        let mut records = Vec::new();
        while (cur.position() as usize) < bytes.len() {
            let index = records.len();
            let bad = AuditImportError::Malformed { index };
            let len = read_u32(&mut cur).ok_or(bad.clone())? as usize;
            let body = read_bytes(&mut cur, len).ok_or(bad.clone())?;
            records.push(decode_binary_record(&body).ok_or(bad)?);
        }
        if records.len() as u64 != count {
            // truncation or a corrupted count: blame the first missing or extra record
            return Err(AuditImportError::Malformed { index: records.len().min(count as usize) });
        }
        Ok(Self { records })
    }

    pub fn write_text<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(self.export_text().as_bytes())
    }
}

pub fn verify_chain(records: &[AuditRecord]) -> Result<(), usize> {
    let mut prev = hex::encode(GENESIS_HASH);
    for (i, r) in records.iter().enumerate() {
        if r.index != i as u64 || r.prev_hash != prev || r.hash != r.expected_hash() {
            return Err(i);
        }
        prev = r.hash.clone();
    }
    Ok(())
}

/// Import either export format and verify; errors carry the first broken record index.
pub fn verify_export(bytes: &[u8]) -> Result<usize, Option<usize>> {
    let log = if bytes.starts_with(BINARY_MAGIC) {
        AuditLog::import_binary(bytes)
    } else {
        std::str::from_utf8(bytes)
            .map_err(|e| {
                // attribute invalid UTF-8 to the line it sits on
                let line = bytes[..e.valid_up_to()].iter().filter(|b| **b == b'\n').count();
                if line == 0 { AuditImportError::Header } else { AuditImportError::Malformed { index: line - 1 } }
            })
            .and_then(AuditLog::import_text)
    }
    .map_err(|e| e.index())?;
    log.verify().map_err(Some)?;
    Ok(log.len())
}

fn decode_binary_record(body: &[u8]) -> Option<AuditRecord> {
    let mut cur = io::Cursor::new(body);
    let index = read_u64(&mut cur)?;
    let ts = SimTime::from_micros(read_u64(&mut cur)?);
    let mut strings = Vec::new();
    for _ in 0..4 {
        let n = read_u32(&mut cur)? as usize;
        strings.push(String::from_utf8(read_bytes(&mut cur, n)?).ok()?);
    }
    let mut hashes = Vec::new();
    for _ in 0..2 {
        let n = read_u32(&mut cur)? as usize;
        hashes.push(hex::encode(read_bytes(&mut cur, n)?));
    }
    if cur.position() as usize != body.len() {
        return None;
    }
    let [actor, action, object, outcome]: [String; 4] = strings.try_into().ok()?;
    let [prev_hash, hash]: [String; 2] = hashes.try_into().ok()?;
    Some(AuditRecord { index, timestamp: ts, actor, action, object, outcome, prev_hash, hash })
}

fn read_bytes(cur: &mut io::Cursor<&[u8]>, n: usize) -> Option<Vec<u8>> {
    let remaining = cur.get_ref().len().saturating_sub(cur.position() as usize);
    if n > remaining {
        return None;
    }
    let mut buf = vec![0u8; n];
    cur.read_exact(&mut buf).ok()?;
    Some(buf)
}

fn read_u16(cur: &mut io::Cursor<&[u8]>) -> Option<u16> {
    Some(u16::from_be_bytes(read_bytes(cur, 2)?.try_into().ok()?))
}

fn read_u32(cur: &mut io::Cursor<&[u8]>) -> Option<u32> {
    Some(u32::from_be_bytes(read_bytes(cur, 4)?.try_into().ok()?))
}

fn read_u64(cur: &mut io::Cursor<&[u8]>) -> Option<u64> {
    Some(u64::from_be_bytes(read_bytes(cur, 8)?.try_into().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn center_with(cred: &Credential) -> AuthCenter {
        let mut c = AuthCenter::new();
        c.register(cred.clone()).unwrap();
        c
    }

    #[test]
    fn aka_success_and_replay() {
        let cred = Credential::sim("imsi-1", [7u8; 16]);
        let mut net = center_with(&cred);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = net.challenge("imsi-1", &mut rng);
        let s = authenticate("d1", &cred, &mut net, &ch, SimTime::ZERO).unwrap();
        assert_eq!(s.expiry, SimTime::from_secs(3600.0));
        assert_eq!(net.counter("imsi-1"), Some(1));
        assert_eq!(
            authenticate("d1", &cred, &mut net, &ch, SimTime::ZERO),
            Err(AuthError::ReplayDetected { sqn: 1, counter: 1 })
        );
    }

    #[test]
    fn wrong_key_and_unknown_subscriber() {
        let cred = Credential::sim("imsi-1", [7u8; 16]);
        let mut net = center_with(&cred);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = net.challenge("imsi-1", &mut rng);
        let forged = Credential::sim("imsi-1", [8u8; 16]);
        assert_eq!(authenticate("d1", &forged, &mut net, &ch, SimTime::ZERO), Err(AuthError::KeyMismatch));
        assert_eq!(net.counter("imsi-1"), Some(0));
        let stranger = Credential::sim("imsi-9", [7u8; 16]);
        assert!(matches!(
            authenticate("d9", &stranger, &mut net, &ch, SimTime::ZERO),
            Err(AuthError::UnknownSubscriber(_))
        ));
    }

    #[test]
    fn certificates_use_trust_store() {
        let cert = Credential {
            kind: CredentialKind::Certificate,
            subscriber: "agv-7".into(),
            secret: "fp:abc".into(),
            sequence_counter: 0,
        };
        let mut net = center_with(&cert);
        let ch = Challenge { rand: [0; 16], sqn: 1 };
        assert_eq!(authenticate("a", &cert, &mut net, &ch, SimTime::ZERO), Err(AuthError::UntrustedCertificate));
        net.trust("fp:abc");
        assert!(authenticate("a", &cert, &mut net, &ch, SimTime::ZERO).is_ok());
    }

    #[test]
    fn cell_tokens() {
        let anchor = TrustAnchor::from_seed(1);
        let tok = anchor.issue("cell-a");
        assert_eq!(verify_network("cell-a", &tok, &anchor), Ok(()));
        assert_eq!(verify_network("cell-b", &tok, &anchor), Err(AuthError::InvalidToken));
        let rogue = TrustAnchor::from_seed(2);
        assert_eq!(verify_network("cell-a", &rogue.issue("cell-a"), &anchor), Err(AuthError::InvalidToken));
    }

    #[test]
    fn access_rules_default_deny() {
        let policy = AccessPolicy {
            rules: vec![AccessRule {
                subject: "sensor".into(),
                action: AccessAction::Publish,
                object: MEMBER_SLICE.into(),
                allow: true,
            }],
        };
        let s = Session {
            device: "s1".into(),
            subscriber: "imsi".into(),
            issued: SimTime::ZERO,
            expiry: SimTime::from_secs(10.0),
            key_id: String::new(),
        };
        let t = SimTime::from_secs(1.0);
        assert_eq!(policy.authorize(&s, t, "sensor", AccessAction::Publish, "sl-a", true), Ok(Decision::Allow));
        assert_eq!(policy.authorize(&s, t, "sensor", AccessAction::JoinSlice, "sl-b", false), Ok(Decision::Deny));
        assert_eq!(policy.authorize(&s, t, "sensor", AccessAction::Publish, "sl-b", false), Ok(Decision::Deny));
        assert_eq!(
            policy.authorize(&s, SimTime::from_secs(11.0), "sensor", AccessAction::Publish, "sl-a", true),
            Err(AuthError::ExpiredSession)
        );
    }

    fn sample_log(n: usize) -> AuditLog {
        let mut log = AuditLog::new();
        for i in 0..n {
            log.append(SimTime::from_millis(i as u64 * 10), "federation", "handover", &format!("dev-{i}"), "completed");
        }
        log
    }

    #[test]
    fn audit_chain_examples() {
        assert_eq!(AuditLog::new().verify(), Ok(()));
        let mut log = sample_log(3);
        assert_eq!(log.verify(), Ok(()));
        log.records[2].outcome = "complete!".into();
        assert_eq!(log.verify(), Err(2));
    }

    #[test]
    fn exports_round_trip() {
        let log = sample_log(5);
        assert_eq!(AuditLog::import_text(&log.export_text()).unwrap(), log);
        assert_eq!(AuditLog::import_binary(&log.export_binary()).unwrap(), log);
        assert!(log.export_text().starts_with("#flexicell-audit v1 hash=sha256\n"));
    }

    fn record_spans_text(text: &str) -> Vec<(usize, usize)> {
        let header_end = text.find('\n').unwrap() + 1;
        let mut spans = Vec::new();
        let mut start = header_end;
        for (i, b) in text.bytes().enumerate().skip(header_end) {
            if b == b'\n' {
                spans.push((start, i + 1));
                start = i + 1;
            }
        }
        spans
    }

    #[test]
    fn every_text_byte_flip_is_located() {
        let log = sample_log(4);
        let text = log.export_text();
        for (rec, (a, b)) in record_spans_text(&text).into_iter().enumerate() {
            for pos in a..b {
                for mask in [0x01u8, 0x20, 0x80] {
                    let mut bytes = text.clone().into_bytes();
                    bytes[pos] ^= mask;
                    assert_eq!(verify_export(&bytes), Err(Some(rec)), "pos {pos} mask {mask:#x}");
                }
            }
        }
    }

    #[test]
    fn every_binary_byte_flip_is_located() {
        let log = sample_log(4);
        let bin = log.export_binary();
        let mut pos = 8 + 2 + HASH_ALGORITHM.len() + 8;
        let mut spans = Vec::new();
        while pos < bin.len() {
            let len = u32::from_be_bytes(bin[pos..pos + 4].try_into().unwrap()) as usize;
            spans.push((pos, pos + 4 + len));
            pos += 4 + len;
        }
        for (rec, (a, b)) in spans.into_iter().enumerate() {
            for p in a..b {
                let mut bytes = bin.clone();
                bytes[p] ^= 0x01;
                assert_eq!(verify_export(&bytes), Err(Some(rec)), "pos {p}");
            }
        }
    }
}
