//! Deterministic simulated message bus on the scenario step clock.
//!
//! Links are directed. Latency is counted in whole steps, drops are drawn
//! from one seeded RNG in send order, and scheduled outages are half-open
//! step intervals `[t_start, t_end)`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub type Step = u64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CommsError {
    #[error("no link from `{from}` to `{to}`")]
    UnknownLink { from: String, to: String },
    #[error("partition sets overlap on {0:?}")]
    OverlappingSets(Vec<String>),
    #[error("invalid link `{from}`->`{to}`: {reason}")]
    InvalidLink { from: String, to: String, reason: String },
    #[error("malformed frame: {0}")]
    Frame(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Outage {
    pub t_start: Step,
    pub t_end: Step,
}

impl Outage {
    pub fn contains(&self, t: Step) -> bool {
        t >= self.t_start && t < self.t_end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub latency_steps: Step,
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default)]
    pub scheduled_outages: Vec<Outage>,
}

impl LinkModel {
    pub fn new(from: &str, to: &str, latency_steps: Step) -> Self {
        LinkModel {
            from: from.into(),
            to: to.into(),
            latency_steps,
            drop_probability: 0.0,
            scheduled_outages: Vec::new(),
        }
    }

    pub fn check(&self) -> Result<(), CommsError> {
        let bad = |reason: String| CommsError::InvalidLink {
            from: self.from.clone(),
            to: self.to.clone(),
            reason,
        };
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(bad(format!("drop probability {} outside [0, 1]", self.drop_probability)));
        }
        if let Some(o) = self.scheduled_outages.iter().find(|o| o.t_end < o.t_start) {
            return Err(bad(format!("outage [{}, {}) ends before it starts", o.t_start, o.t_end)));
        }
        Ok(())
    }

    pub fn in_outage(&self, t: Step) -> bool {
        self.scheduled_outages.iter().any(|o| o.contains(t))
    }
}

/// Tag used for message logs.
pub trait MessageKind {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<M> {
    pub from: String,
    pub to: String,
    /// Bus-wide send counter.
    pub seq: u64,
    pub t_sent: Step,
    pub deliver_at: Step,
    pub msg: M,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub t_sent: Step,
    /// `None` for dropped messages.
    pub t_delivered: Option<Step>,
    pub kind: String,
    pub from: String,
    pub to: String,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Outage,
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Queued { deliver_at: Step },
    Dropped(DropReason),
}

#[derive(Debug, Clone)]
pub struct Bus<M> {
    links: BTreeMap<(String, String), LinkModel>,
    /// Keyed by `(deliver_at, seq)`, which is stable insertion order per
    /// delivery step.
    queue: BTreeMap<(Step, u64), Envelope<M>>,
    rng: ChaCha8Rng,
    seed: u64,
    next_seq: u64,
    log: Vec<DeliveryRecord>,
}

impl<M: MessageKind> Bus<M> {
    pub fn new(seed: u64, links: impl IntoIterator<Item = LinkModel>) -> Result<Self, CommsError> {
        let mut bus = Bus {
            links: BTreeMap::new(),
            queue: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            next_seq: 0,
            log: Vec::new(),
        };
        for l in links {
            bus.add_link(l)?;
        }
        Ok(bus)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Adds or replaces the link `from -> to`.
    pub fn add_link(&mut self, link: LinkModel) -> Result<(), CommsError> {
        link.check()?;
        self.links.insert((link.from.clone(), link.to.clone()), link);
        Ok(())
    }

    pub fn link(&self, from: &str, to: &str) -> Option<&LinkModel> {
        self.links.get(&(from.to_string(), to.to_string()))
    }

    pub fn links(&self) -> impl Iterator<Item = &LinkModel> {
        self.links.values()
    }

    pub fn send(&mut self, from: &str, to: &str, msg: M, now: Step) -> Result<SendOutcome, CommsError> {
        let link = self
            .links
            .get(&(from.to_string(), to.to_string()))
            .ok_or_else(|| CommsError::UnknownLink {
                from: from.into(),
                to: to.into(),
            })?;
        let seq = self.next_seq;
        self.next_seq += 1;
        // One draw per send keeps the stream aligned with the send sequence.
        let draw: f64 = self.rng.random_range(0.0..1.0);
        let outcome = if link.in_outage(now) {
            SendOutcome::Dropped(DropReason::Outage)
        } else if draw < link.drop_probability {
            SendOutcome::Dropped(DropReason::Loss)
        } else {
            SendOutcome::Queued {
                deliver_at: now + link.latency_steps,
            }
        };
        match outcome {
            SendOutcome::Dropped(_) => self.log.push(DeliveryRecord {
                t_sent: now,
                t_delivered: None,
                kind: msg.kind().into(),
                from: from.into(),
                to: to.into(),
                seq,
            }),
            SendOutcome::Queued { deliver_at } => {
                self.queue.insert(
                    (deliver_at, seq),
                    Envelope {
                        from: from.into(),
                        to: to.into(),
                        seq,
                        t_sent: now,
                        deliver_at,
                        msg,
                    },
                );
            }
        }
        Ok(outcome)
    }

    /// Removes and returns every message due at or before `now`, ordered by
    /// delivery step then send order.
    pub fn deliver_due(&mut self, now: Step) -> Vec<Envelope<M>> {
        let later = self.queue.split_off(&(now + 1, 0));
        let due = std::mem::replace(&mut self.queue, later);
        due.into_values()
            .inspect(|e| {
                self.log.push(DeliveryRecord {
                    t_sent: e.t_sent,
                    t_delivered: Some(now),
                    kind: e.msg.kind().into(),
                    from: e.from.clone(),
                    to: e.to.clone(),
                    seq: e.seq,
                });
            })
            .collect()
    }

    /// Installs an outage `[t_start, t_end)` on every existing link between
    /// the two node sets, in both directions.
    pub fn partition(&mut self, a: &[&str], b: &[&str], t_start: Step, t_end: Step) -> Result<(), CommsError> {
        let sa: BTreeSet<&str> = a.iter().copied().collect();
        let sb: BTreeSet<&str> = b.iter().copied().collect();
        let overlap: Vec<String> = sa.intersection(&sb).map(|s| s.to_string()).collect();
        if !overlap.is_empty() {
            return Err(CommsError::OverlappingSets(overlap));
        }
        if t_end <= t_start {
            return Ok(());
        }
        for ((from, to), link) in self.links.iter_mut() {
            let (f, t) = (from.as_str(), to.as_str());
            if (sa.contains(f) && sb.contains(t)) || (sb.contains(f) && sa.contains(t)) {
                link.scheduled_outages.push(Outage { t_start, t_end });
                link.scheduled_outages.sort();
            }
        }
        Ok(())
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn log(&self) -> &[DeliveryRecord] {
        &self.log
    }
}

pub fn write_log_csv<W: Write>(log: &[DeliveryRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_sent", "t_delivered", "kind", "from", "to", "seq"])?;
    for r in log {
        let delivered = r.t_delivered.map_or_else(|| "DROPPED".to_string(), |t| t.to_string());
        w.write_record([
            r.t_sent.to_string(),
            delivered,
            r.kind.clone(),
            r.from.clone(),
            r.to.clone(),
            r.seq.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Wire form of one record: `<byte length>:<json>\n`.
pub fn encode_frame<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("message types serialise");
    format!("{}:{}\n", json.len(), json)
}

/// Splits a stream of frames and parses each record.
pub fn decode_frames<T: DeserializeOwned>(mut text: &str) -> Result<Vec<T>, CommsError> {
    let mut out = Vec::new();
    while !text.is_empty() {
        let colon = text
            .find(':')
            .ok_or_else(|| CommsError::Frame("missing length prefix".into()))?;
        let len: usize = text[..colon]
            .trim()
            .parse()
            .map_err(|_| CommsError::Frame(format!("bad length `{}`", &text[..colon])))?;
        let body_end = colon + 1 + len;
        let body = text
            .get(colon + 1..body_end)
            .ok_or_else(|| CommsError::Frame("truncated record".into()))?;
        out.push(serde_json::from_str(body).map_err(|e| CommsError::Frame(e.to_string()))?);
        text = &text[body_end..];
        text = text.strip_prefix('\n').ok_or_else(|| CommsError::Frame("missing record terminator".into()))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Ping(u32);

    impl MessageKind for Ping {
        fn kind(&self) -> &'static str {
            "ping"
        }
    }

    fn bus(latency: Step, p: f64) -> Bus<Ping> {
        let mut l = LinkModel::new("a", "b", latency);
        l.drop_probability = p;
        Bus::new(7, [l, LinkModel::new("b", "a", latency)]).unwrap()
    }

    #[test]
    fn zero_latency_same_step() {
        let mut b = bus(0, 0.0);
        b.send("a", "b", Ping(1), 3).unwrap();
        let d = b.deliver_due(3);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].msg, Ping(1));
    }

    #[test]
    fn latency_two() {
        let mut b = bus(2, 0.0);
        b.send("a", "b", Ping(1), 5).unwrap();
        assert!(b.deliver_due(6).is_empty());
        assert_eq!(b.deliver_due(7).len(), 1);
    }

    #[test]
    fn empty_queue() {
        let mut b = bus(0, 0.0);
        assert!(b.deliver_due(0).is_empty());
    }

    #[test]
    fn insertion_order_kept() {
        let mut b = bus(1, 0.0);
        b.send("a", "b", Ping(1), 0).unwrap();
        b.send("b", "a", Ping(2), 0).unwrap();
        b.send("a", "b", Ping(3), 0).unwrap();
        let got: Vec<u32> = b.deliver_due(1).into_iter().map(|e| e.msg.0).collect();
        assert_eq!(got, vec![1, 2, 3]);
    }

    #[test]
    fn outage_drops() {
        let mut b = bus(0, 0.0);
        b.partition(&["a"], &["b"], 2, 4).unwrap();
        assert_eq!(
            b.send("a", "b", Ping(1), 2).unwrap(),
            SendOutcome::Dropped(DropReason::Outage)
        );
        assert_eq!(
            b.send("b", "a", Ping(2), 3).unwrap(),
            SendOutcome::Dropped(DropReason::Outage)
        );
        assert!(matches!(b.send("a", "b", Ping(3), 4).unwrap(), SendOutcome::Queued { .. }));
        assert!(b.deliver_due(10).iter().all(|e| e.msg == Ping(3)));
        assert_eq!(b.log().iter().filter(|r| r.t_delivered.is_none()).count(), 2);
    }

    #[test]
    fn certain_loss() {
        let mut b = bus(0, 1.0);
        for t in 0..20 {
            assert_eq!(b.send("a", "b", Ping(t as u32), t).unwrap(), SendOutcome::Dropped(DropReason::Loss));
        }
    }

    #[test]
    fn unknown_link() {
        let mut b = bus(0, 0.0);
        assert!(matches!(b.send("a", "c", Ping(0), 0), Err(CommsError::UnknownLink { .. })));
    }

    #[test]
    fn partition_rules() {
        let mut b: Bus<Ping> = Bus::new(
            0,
            [
                LinkModel::new("c", "e1", 0),
                LinkModel::new("e1", "e2", 0),
                LinkModel::new("e2", "c", 0),
            ],
        )
        .unwrap();
        assert!(matches!(
            b.partition(&["c", "e1"], &["e1"], 0, 5),
            Err(CommsError::OverlappingSets(_))
        ));
        b.partition(&["c"], &["e1", "e2"], 3, 3).unwrap();
        assert!(b.links().all(|l| l.scheduled_outages.is_empty()));
        b.partition(&["c"], &["e1", "e2"], 1, 5).unwrap();
        assert!(b.link("e1", "e2").unwrap().scheduled_outages.is_empty());
        assert!(b.link("c", "e1").unwrap().in_outage(1));
        assert!(b.link("e2", "c").unwrap().in_outage(4));
        assert!(!b.link("e2", "c").unwrap().in_outage(5));
    }

    #[test]
    fn invalid_links() {
        let mut l = LinkModel::new("a", "b", 0);
        l.drop_probability = 1.5;
        assert!(l.check().is_err());
        l.drop_probability = 0.0;
        l.scheduled_outages.push(Outage { t_start: 4, t_end: 2 });
        assert!(l.check().is_err());
    }

    #[test]
    fn csv_log() {
        let mut b = bus(1, 0.0);
        b.partition(&["a"], &["b"], 0, 1).unwrap();
        b.send("a", "b", Ping(1), 0).unwrap();
        b.send("a", "b", Ping(2), 1).unwrap();
        b.deliver_due(2);
        let mut out = Vec::new();
        write_log_csv(b.log(), &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "t_sent,t_delivered,kind,from,to,seq\n0,DROPPED,ping,a,b,0\n1,2,ping,a,b,1\n"
        );
    }

    #[test]
    fn frames_round_trip() {
        let text = format!("{}{}", encode_frame(&Ping(4)), encode_frame(&Ping(5)));
        assert!(text.starts_with("1:4\n"));
        let back: Vec<Ping> = decode_frames(&text).unwrap();
        assert_eq!(back, vec![Ping(4), Ping(5)]);
        assert!(decode_frames::<Ping>("3:4\n").is_err());
    }
}
