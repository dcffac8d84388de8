//! Wire messages between roles and the per-role mailbox.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    /// Payload of a user or auxiliary operation.
    Msg,
    /// Transport acknowledgement; echoes `op` and `seq` of the acked message.
    Ack,
    Ready,
    Start,
    Directive,
    Done,
}

impl MessageKind {
    /// Whether the receiver answers with an `ack`.
    pub fn is_rendezvous(self) -> bool {
        matches!(self, MessageKind::Msg | MessageKind::Directive | MessageKind::Done)
    }
}

/// One newline-delimited JSON object on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub seq: u64,
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<serde_json::Value>,
    /// Choreography node that produced the message, for misdelivery checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

impl Message {
    pub fn op(&self) -> &str {
        self.op.as_deref().unwrap_or("")
    }

    /// The acknowledgement for `self`.
    pub fn ack(&self) -> Message {
        Message {
            kind: MessageKind::Ack,
            seq: self.seq,
            from: self.to.clone(),
            to: self.from.clone(),
            op: self.op.clone(),
            data: None,
            origin: None,
        }
    }

    pub(crate) fn fingerprint<H: Hasher>(&self, h: &mut H) {
        (self.kind, self.seq, &self.from, &self.to, &self.op, &self.origin).hash(h);
        if let Some(d) = &self.data {
            d.to_string().hash(h);
        }
    }
}

pub(crate) type MailKey = (MessageKind, String, String);

/// Pending messages keyed by `(kind, op, from)`, FIFO within a key.
#[derive(Clone, Debug, Default)]
pub struct Mailbox {
    pending: BTreeMap<MailKey, VecDeque<Message>>,
    acks: BTreeSet<(String, String, u64)>,
}

impl Mailbox {
    pub fn deliver(&mut self, msg: Message) {
        if msg.kind == MessageKind::Ack {
            self.acks.insert((msg.op().to_string(), msg.from.clone(), msg.seq));
        } else {
            let key = (msg.kind, msg.op().to_string(), msg.from.clone());
            self.pending.entry(key).or_default().push_back(msg);
        }
    }

    pub fn has(&self, kind: MessageKind, op: &str, from: &str) -> bool {
        self.pending
            .get(&(kind, op.to_string(), from.to_string()))
            .is_some_and(|q| !q.is_empty())
    }

    pub fn take(&mut self, kind: MessageKind, op: &str, from: &str) -> Option<Message> {
        let key = (kind, op.to_string(), from.to_string());
        let q = self.pending.get_mut(&key)?;
        let m = q.pop_front();
        if q.is_empty() {
            self.pending.remove(&key);
        }
        m
    }

    pub fn has_ack(&self, op: &str, from: &str, seq: u64) -> bool {
        self.acks.contains(&(op.to_string(), from.to_string(), seq))
    }

    pub fn take_ack(&mut self, op: &str, from: &str, seq: u64) -> bool {
        self.acks.remove(&(op.to_string(), from.to_string(), seq))
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty() && self.acks.is_empty()
    }

    /// Number of unconsumed messages and acks.
    pub fn len(&self) -> usize {
        self.pending.values().map(VecDeque::len).sum::<usize>() + self.acks.len()
    }

    pub fn leftovers(&self) -> Vec<Message> {
        self.pending.values().flatten().cloned().collect()
    }

    pub(crate) fn fingerprint<H: Hasher>(&self, h: &mut H) {
        for q in self.pending.values() {
            q.len().hash(h);
            for m in q {
                m.fingerprint(h);
            }
        }
        self.acks.hash(h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(op: &str, seq: u64, v: i64) -> Message {
        Message {
            kind: MessageKind::Msg,
            seq,
            from: "a".into(),
            to: "b".into(),
            op: Some(op.into()),
            data: Some(serde_json::json!(v)),
            origin: None,
        }
    }

    #[test]
    fn fifo_per_key() {
        let mut mb = Mailbox::default();
        mb.deliver(msg("p", 1, 10));
        mb.deliver(msg("q", 2, 20));
        mb.deliver(msg("p", 3, 30));
        assert_eq!(mb.take(MessageKind::Msg, "p", "a").unwrap().seq, 1);
        assert_eq!(mb.take(MessageKind::Msg, "p", "a").unwrap().seq, 3);
        assert!(mb.take(MessageKind::Msg, "p", "a").is_none());
        assert!(!mb.has(MessageKind::Msg, "q", "b"));
        assert!(mb.has(MessageKind::Msg, "q", "a"));
    }

    #[test]
    fn wire_format() {
        let m = msg("p", 7, 5);
        let line = serde_json::to_string(&m).unwrap();
        assert_eq!(line, r#"{"kind":"msg","seq":7,"from":"a","to":"b","op":"p","data":5}"#);
        let ack = serde_json::to_string(&m.ack()).unwrap();
        assert_eq!(ack, r#"{"kind":"ack","seq":7,"from":"b","to":"a","op":"p"}"#);
    }
}
