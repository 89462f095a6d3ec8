//! Simulated multiparty protocols over an in-memory message bus.
//!
//! The cohort uses a star topology around member 0 (the master). A
//! collective refresh or key switch is one round: the master sends the
//! ciphertext to every other member and waits for one share from each.
//! Shares are opaque tokens; only message structure, key layers and
//! accounting are modelled.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{CipherVec, KeyId, SimdBackend, Simulator, C64};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    CBootstrap,
    CKeySwitch,
    ObvDec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PartyId {
    Client,
    Provider,
    Member(u32),
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartyId::Client => f.write_str("client"),
            PartyId::Provider => f.write_str("provider"),
            PartyId::Member(i) => write!(f, "member-{i}"),
        }
    }
}

impl FromStr for PartyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "client" => Ok(PartyId::Client),
            "provider" => Ok(PartyId::Provider),
            _ => s
                .strip_prefix("member-")
                .and_then(|i| i.parse().ok())
                .map(PartyId::Member)
                .ok_or_else(|| Error::Parse(format!("unknown party {s:?}"))),
        }
    }
}

impl TryFrom<String> for PartyId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PartyId> for String {
    fn from(p: PartyId) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Client,
    Provider,
    CohortMember,
    Master,
}

/// One secret-key share of a collective key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShareToken {
    pub key: KeyId,
    pub index: u32,
}

#[derive(Debug, Clone)]
pub struct Party {
    pub id: PartyId,
    pub role: Role,
    keys: BTreeSet<KeyId>,
    pub share: Option<ShareToken>,
    pub online: bool,
}

impl Party {
    pub fn new(id: PartyId, role: Role, keys: impl IntoIterator<Item = KeyId>) -> Self {
        Self {
            id,
            role,
            keys: keys.into_iter().collect(),
            share: None,
            online: true,
        }
    }

    pub fn client() -> Self {
        Self::new(PartyId::Client, Role::Client, [KeyId::Client])
    }

    pub fn provider() -> Self {
        Self::new(PartyId::Provider, Role::Provider, [KeyId::Provider])
    }

    pub fn holds(&self, key: KeyId) -> bool {
        self.keys.contains(&key)
    }

    pub fn grant(&mut self, key: KeyId) {
        self.keys.insert(key);
    }

    pub fn revoke(&mut self, key: KeyId) {
        self.keys.remove(&key);
    }

    /// Strips every key layer and reads the slots. Only allowed when this
    /// party holds all keys `ct` is encrypted under. Logged either way.
    pub fn open(&self, sim: &Simulator, ct: &CipherVec, bus: &mut Bus) -> Result<Vec<C64>> {
        let layers = ct.key_layers().to_vec();
        let granted = layers.iter().all(|k| self.holds(*k));
        bus.audit.push(AccessEvent {
            party: self.id,
            layers: layers.clone(),
            granted,
        });
        if !granted {
            return Err(Error::AccessViolation(format!(
                "{} cannot read a ciphertext under {layers:?}",
                self.id
            )));
        }
        let mut clear = ct.clone();
        for k in layers {
            clear = sim.decrypt(&clear, k)?;
        }
        sim.decode(&clear)
    }
}

/// A slot read attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub party: PartyId,
    pub layers: Vec<KeyId>,
    pub granted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub protocol: Protocol,
    pub round: u64,
    pub sender: PartyId,
    pub recipient: PartyId,
    pub bytes_estimate: u64,
}

/// Per-message delivery delay in virtual microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Latency {
    pub base_us: u64,
    pub jitter_us: u64,
}

impl Default for Latency {
    fn default() -> Self {
        Self {
            base_us: 20_000,
            jitter_us: 5_000,
        }
    }
}

struct Envelope {
    sender: PartyId,
    recipient: PartyId,
    bytes: u64,
    sent_at: u64,
}

/// Discrete-event message bus with a seeded scheduler.
#[derive(Debug, Clone)]
pub struct Bus {
    rng: ChaCha8Rng,
    latency: Latency,
    clock_us: u64,
    rounds: u64,
    transcript: Vec<TranscriptEntry>,
    audit: Vec<AccessEvent>,
}

impl Bus {
    pub fn new(seed: u64) -> Self {
        Self::with_latency(seed, Latency::default())
    }

    pub fn with_latency(seed: u64, latency: Latency) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            latency,
            clock_us: 0,
            rounds: 0,
            transcript: Vec::new(),
            audit: Vec::new(),
        }
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn audit(&self) -> &[AccessEvent] {
        &self.audit
    }

    /// Virtual time after the last delivery.
    pub fn clock_us(&self) -> u64 {
        self.clock_us
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn open_round(&mut self) -> u64 {
        self.rounds += 1;
        self.rounds
    }

    /// Delivers `msgs` in arrival order and returns the arrival times, in that order.
    fn deliver(
        &mut self,
        protocol: Protocol,
        round: u64,
        msgs: Vec<Envelope>,
    ) -> Vec<(PartyId, u64)> {
        let mut timed: Vec<(u64, usize, Envelope)> = msgs
            .into_iter()
            .enumerate()
            .map(|(seq, e)| {
                let jitter = if self.latency.jitter_us == 0 {
                    0
                } else {
                    self.rng.gen_range(0..=self.latency.jitter_us)
                };
                (e.sent_at + self.latency.base_us + jitter, seq, e)
            })
            .collect();
        timed.sort_by_key(|(at, seq, _)| (*at, *seq));
        let mut out = Vec::with_capacity(timed.len());
        for (at, _, e) in timed {
            self.transcript.push(TranscriptEntry {
                protocol,
                round,
                sender: e.sender,
                recipient: e.recipient,
                bytes_estimate: e.bytes,
            });
            self.clock_us = self.clock_us.max(at);
            out.push((e.recipient, at));
        }
        out
    }
}

/// Serialises a transcript as JSON lines.
pub fn transcript_to_jsonl(entries: &[TranscriptEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("transcript entry serialises") + "\n")
        .collect()
}

pub fn parse_transcript(text: &str) -> Result<Vec<TranscriptEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Parse(format!("transcript line {}: {e}", i + 1)))
        })
        .collect()
}

/// `N` providers jointly holding the shares of `KeyId::Collective(N)`.
#[derive(Debug, Clone)]
pub struct Cohort {
    members: Vec<Party>,
}

impl Cohort {
    pub fn new(n: u32) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!(
                "a collective key needs at least 2 holders, got {n}"
            )));
        }
        let key = KeyId::Collective(n);
        let members = (0..n)
            .map(|i| {
                let role = if i == 0 {
                    Role::Master
                } else {
                    Role::CohortMember
                };
                let mut p = Party::new(PartyId::Member(i), role, []);
                p.share = Some(ShareToken { key, index: i });
                p
            })
            .collect();
        Ok(Self { members })
    }

    pub fn size(&self) -> u32 {
        self.members.len() as u32
    }

    pub fn key(&self) -> KeyId {
        KeyId::Collective(self.size())
    }

    pub fn members(&self) -> &[Party] {
        &self.members
    }

    pub fn master(&self) -> &Party {
        &self.members[0]
    }

    pub fn set_online(&mut self, index: usize, online: bool) {
        self.members[index].online = online;
    }

    /// Messages one round of a share-collection protocol produces.
    pub fn messages_per_round(&self) -> u64 {
        2 * (u64::from(self.size()) - 1)
    }

    fn check(&self, ct: &CipherVec) -> Result<()> {
        if ct.key_layers() != [self.key()] {
            return Err(Error::KeyMismatch {
                left: ct.key_layers().to_vec(),
                right: vec![self.key()],
            });
        }
        if let Some(p) = self.members.iter().find(|p| !p.online) {
            return Err(Error::ProtocolAborted(format!("{} is unreachable", p.id)));
        }
        Ok(())
    }

    /// Master broadcast plus one share per other member; returns when the last share lands.
    fn share_round(&self, bus: &mut Bus, protocol: Protocol, ct: &CipherVec) {
        let round = bus.open_round();
        let master = self.master().id;
        let start = bus.clock_us;
        let bytes = ct.bytes_estimate();
        let requests = self.members[1..]
            .iter()
            .map(|p| Envelope {
                sender: master,
                recipient: p.id,
                bytes,
                sent_at: start,
            })
            .collect();
        let arrivals = bus.deliver(protocol, round, requests);
        let replies = arrivals
            .into_iter()
            .map(|(member, at)| Envelope {
                sender: member,
                recipient: master,
                bytes: bytes / 2,
                sent_at: at,
            })
            .collect();
        bus.deliver(protocol, round, replies);
    }
}

/// Collective refresh: full level budget, slots untouched, one round.
pub fn cbootstrap(
    sim: &Simulator,
    bus: &mut Bus,
    cohort: &Cohort,
    ct: &CipherVec,
) -> Result<CipherVec> {
    cohort.check(ct)?;
    cohort.share_round(bus, Protocol::CBootstrap, ct);
    sim.record_protocol(1, cohort.messages_per_round());
    Ok(sim.refresh_collective(ct))
}

/// Collective key switch to `target`; level and slots unchanged.
pub fn ckeyswitch(
    sim: &Simulator,
    bus: &mut Bus,
    cohort: &Cohort,
    ct: &CipherVec,
    target: KeyId,
) -> Result<CipherVec> {
    if target == cohort.key() {
        return Err(Error::Config(
            "key switch target equals the collective key".into(),
        ));
    }
    cohort.check(ct)?;
    cohort.share_round(bus, Protocol::CKeySwitch, ct);
    sim.record_protocol(1, cohort.messages_per_round());
    Ok(sim.rekey(ct, vec![target]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObvDecOptions {
    /// Mask entries are uniform in `[-mask_range, mask_range]` per component.
    pub mask_range: f64,
    /// Makes the provider try to read the slots it holds mid-protocol.
    pub provider_probe: bool,
}

impl Default for ObvDecOptions {
    fn default() -> Self {
        Self {
            mask_range: 1.0e3,
            provider_probe: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObvDecOutcome {
    pub values: Vec<C64>,
    /// Key layers of the ciphertext the provider handed back.
    pub provider_view_layers: Vec<KeyId>,
}

/// Oblivious decryption of a provider-key ciphertext for the client.
pub fn obvdec(
    sim: &Simulator,
    bus: &mut Bus,
    ct: &CipherVec,
    client: &mut Party,
    provider: &Party,
    opts: ObvDecOptions,
) -> Result<ObvDecOutcome> {
    if ct.key_layers() != [KeyId::Provider] {
        return Err(Error::KeyMismatch {
            left: ct.key_layers().to_vec(),
            right: vec![KeyId::Provider],
        });
    }
    if client.holds(KeyId::Provider) {
        return Err(Error::Config(
            "client must not hold the provider key".into(),
        ));
    }
    if !provider.holds(KeyId::Provider) {
        return Err(Error::WrongKey(KeyId::Provider));
    }
    let round = bus.open_round();
    let ephemeral = KeyId::Ephemeral(bus.rng.gen());
    let r = opts.mask_range;
    let mask: Vec<C64> = (0..sim.params().slot_count)
        .map(|_| C64::new(bus.rng.gen_range(-r..=r), bus.rng.gen_range(-r..=r)))
        .collect();
    let masked = sim.add_plain(&sim.encrypt(ct, ephemeral), &mask)?;

    let start = bus.clock_us;
    let up = vec![Envelope {
        sender: client.id,
        recipient: provider.id,
        bytes: masked.bytes_estimate(),
        sent_at: start,
    }];
    let at = bus.deliver(Protocol::ObvDec, round, up)[0].1;

    let stripped = sim.decrypt(&masked, KeyId::Provider)?;
    let view = stripped.key_layers().to_vec();
    if view.is_empty() {
        return Err(Error::AccessViolation(
            "provider holds an unlayered prediction".into(),
        ));
    }
    if opts.provider_probe {
        provider.open(sim, &stripped, bus)?;
    }
    let down = vec![Envelope {
        sender: provider.id,
        recipient: client.id,
        bytes: stripped.bytes_estimate(),
        sent_at: at,
    }];
    bus.deliver(Protocol::ObvDec, round, down);

    client.grant(ephemeral);
    let opened = client.open(sim, &stripped, bus);
    client.revoke(ephemeral);
    let values = opened?.iter().zip(&mask).map(|(v, m)| v - m).collect();
    sim.record_protocol(1, 2);
    Ok(ObvDecOutcome {
        values,
        provider_view_layers: view,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::HeParams;

    fn sim() -> Simulator {
        Simulator::new(HeParams::new(16, 5, 2, 3).unwrap()).unwrap()
    }

    fn vals(seed: u64) -> Vec<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..16)
            .map(|_| C64::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect()
    }

    fn exhausted(sim: &Simulator, key: KeyId) -> CipherVec {
        let mut ct = sim.encrypt_values(&vals(1), key).unwrap();
        for _ in 0..5 {
            ct = sim.mul_const(&ct, C64::new(1.0, 0.0)).unwrap();
        }
        ct
    }

    #[test]
    fn cbootstrap_refreshes_in_one_round() {
        let s = sim();
        let cohort = Cohort::new(3).unwrap();
        let mut bus = Bus::new(7);
        let ct = exhausted(&s, cohort.key());
        assert_eq!(ct.level(), 0);
        let before = s.counters();
        let out = cbootstrap(&s, &mut bus, &cohort, &ct).unwrap();
        let d = s.counters().saturating_sub(&before);
        assert_eq!(out.level(), 5);
        assert_eq!(
            (
                d.protocol_rounds,
                d.protocol_messages,
                d.bootstraps,
                d.bootstrap_levels
            ),
            (1, 4, 1, 0)
        );
        assert_eq!(out.raw_slots(), ct.raw_slots());
        assert_eq!(bus.transcript().len(), 4);
        assert!(bus
            .transcript()
            .iter()
            .all(|e| e.round == 1 && e.protocol == Protocol::CBootstrap));
    }

    #[test]
    fn shares_arrive_in_seeded_order() {
        let s = sim();
        let cohort = Cohort::new(10).unwrap();
        let ct = s.encrypt_values(&vals(2), cohort.key()).unwrap();
        let order = |seed| {
            let mut bus = Bus::new(seed);
            cbootstrap(&s, &mut bus, &cohort, &ct).unwrap();
            bus.transcript()
                .iter()
                .map(|e| e.sender)
                .collect::<Vec<_>>()
        };
        assert_eq!(order(5), order(5));
        let replies: Vec<_> = order(5).into_iter().skip(9).collect();
        assert_eq!(replies.len(), 9);
        assert!(replies.iter().all(|p| *p != PartyId::Member(0)));
    }

    #[test]
    fn cohort_of_one_rejected() {
        assert!(matches!(Cohort::new(1), Err(Error::Config(_))));
        let c = Cohort::new(4).unwrap();
        assert!(c
            .members()
            .iter()
            .all(|m| m.share.is_some() && !m.holds(c.key())));
    }

    #[test]
    fn missing_party_aborts_without_side_effects() {
        let s = sim();
        let mut cohort = Cohort::new(3).unwrap();
        cohort.set_online(2, false);
        let mut bus = Bus::new(1);
        let ct = exhausted(&s, cohort.key());
        let before = s.counters();
        assert!(matches!(
            cbootstrap(&s, &mut bus, &cohort, &ct),
            Err(Error::ProtocolAborted(_))
        ));
        assert!(matches!(
            ckeyswitch(&s, &mut bus, &cohort, &ct, KeyId::Client),
            Err(Error::ProtocolAborted(_))
        ));
        assert_eq!(s.counters(), before);
        assert!(bus.transcript().is_empty());
    }

    #[test]
    fn keyswitch_round_trip() {
        let s = sim();
        let cohort = Cohort::new(5).unwrap();
        let mut bus = Bus::new(3);
        let ct = s.encrypt_values(&vals(4), cohort.key()).unwrap();
        let ct = s.mul_const(&ct, C64::new(2.0, 0.0)).unwrap();
        let before = s.counters();
        let out = ckeyswitch(&s, &mut bus, &cohort, &ct, KeyId::Client).unwrap();
        let d = s.counters().saturating_sub(&before);
        assert_eq!((d.protocol_rounds, d.protocol_messages), (1, 8));
        assert_eq!(out.level(), ct.level());
        assert_eq!(out.key_layers(), [KeyId::Client]);
        let got = Party::client().open(&s, &out, &mut bus).unwrap();
        let want: Vec<C64> = vals(4).iter().map(|v| v * 2.0).collect();
        assert_eq!(got, want);
        assert!(ckeyswitch(&s, &mut bus, &cohort, &ct, cohort.key()).is_err());
    }

    #[test]
    fn wrong_key_layers_rejected() {
        let s = sim();
        let cohort = Cohort::new(3).unwrap();
        let mut bus = Bus::new(0);
        let ct = s.encrypt_values(&vals(1), KeyId::Collective(4)).unwrap();
        assert!(matches!(
            cbootstrap(&s, &mut bus, &cohort, &ct),
            Err(Error::KeyMismatch { .. })
        ));
    }

    #[test]
    fn obvdec_round_trips_and_hides_prediction() {
        let s = sim();
        let mut bus = Bus::new(11);
        let mut client = Party::client();
        let provider = Party::provider();
        let v = vals(9);
        let ct = s.encrypt_values(&v, KeyId::Provider).unwrap();
        let before = s.counters();
        let out = obvdec(
            &s,
            &mut bus,
            &ct,
            &mut client,
            &provider,
            ObvDecOptions::default(),
        )
        .unwrap();
        for (a, b) in out.values.iter().zip(&v) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(!out.provider_view_layers.is_empty());
        assert!(matches!(out.provider_view_layers[0], KeyId::Ephemeral(_)));
        let d = s.counters().saturating_sub(&before);
        assert_eq!((d.protocol_rounds, d.protocol_messages, d.adds), (1, 2, 1));
        let t = bus.transcript();
        assert_eq!(t.len(), 2);
        assert_eq!(
            (t[0].sender, t[0].recipient),
            (PartyId::Client, PartyId::Provider)
        );
        assert_eq!(
            (t[1].sender, t[1].recipient),
            (PartyId::Provider, PartyId::Client)
        );
        assert!(bus
            .audit()
            .iter()
            .all(|e| e.granted && e.party == PartyId::Client));
        assert!(!client.holds(out.provider_view_layers[0]));
    }

    #[test]
    fn provider_probe_is_access_violation() {
        let s = sim();
        let mut bus = Bus::new(2);
        let ct = s.encrypt_values(&vals(3), KeyId::Provider).unwrap();
        let opts = ObvDecOptions {
            provider_probe: true,
            ..Default::default()
        };
        let err = obvdec(
            &s,
            &mut bus,
            &ct,
            &mut Party::client(),
            &Party::provider(),
            opts,
        )
        .unwrap_err();
        assert!(matches!(err, Error::AccessViolation(_)));
        assert!(bus
            .audit()
            .iter()
            .any(|e| !e.granted && e.party == PartyId::Provider));
    }

    #[test]
    fn open_requires_every_layer() {
        let s = sim();
        let mut bus = Bus::new(0);
        let ct = s.encrypt(
            &s.encrypt_values(&vals(1), KeyId::Client).unwrap(),
            KeyId::Provider,
        );
        assert!(matches!(
            Party::client().open(&s, &ct, &mut bus),
            Err(Error::AccessViolation(_))
        ));
        let mut both = Party::client();
        both.grant(KeyId::Provider);
        assert_eq!(both.open(&s, &ct, &mut bus).unwrap(), vals(1));
    }

    #[test]
    fn transcript_jsonl_round_trip() {
        let s = sim();
        let cohort = Cohort::new(2).unwrap();
        let mut bus = Bus::new(4);
        let ct = s.encrypt_values(&vals(1), cohort.key()).unwrap();
        ckeyswitch(&s, &mut bus, &cohort, &ct, KeyId::Client).unwrap();
        let text = transcript_to_jsonl(bus.transcript());
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"protocol\":\"ckeyswitch\""));
        assert!(text.contains("\"sender\":\"member-1\""));
        assert_eq!(parse_transcript(&text).unwrap(), bus.transcript());
        assert!(parse_transcript("{\"protocol\":\"x\"}").is_err());
    }
}
