//! Two-sided messaging with (source, tag) matching. Eager protocol only: a
//! message travels with its data and waits in the unexpected list when no
//! receive is posted yet.

use std::collections::VecDeque;

use thiserror::Error;

use crate::simcore::{id_newtype, Rank, RegionId};

id_newtype!(
    /// A send or receive request.
    ReqId,
    "req"
);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum P2pError {
    #[error("message {src}->{dst} tag {tag}: {sent} bytes do not fit the {posted}-byte receive")]
    Truncation {
        src: Rank,
        dst: Rank,
        tag: u32,
        sent: usize,
        posted: usize,
    },
    #[error("unknown rank {0}")]
    UnknownRank(Rank),
    #[error("message of zero bytes")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope {
    pub src: Rank,
    pub dst: Rank,
    pub tag: u32,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostedRecv {
    pub req: ReqId,
    pub src: Rank,
    pub tag: u32,
    pub region: RegionId,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub envelope: Envelope,
    pub send_req: ReqId,
    pub data: Vec<u8>,
}

/// A receive paired with the message that satisfies it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matched {
    pub recv: PostedRecv,
    pub msg: Message,
}

/// Per-rank posted-receive and unexpected-message lists.
#[derive(Debug)]
pub struct MatchQueues {
    posted: Vec<VecDeque<PostedRecv>>,
    unexpected: Vec<VecDeque<Message>>,
}

fn check_fit(recv: &PostedRecv, msg: &Message) -> Result<(), P2pError> {
    if msg.envelope.bytes > recv.bytes {
        return Err(P2pError::Truncation {
            src: msg.envelope.src,
            dst: msg.envelope.dst,
            tag: msg.envelope.tag,
            sent: msg.envelope.bytes,
            posted: recv.bytes,
        });
    }
    Ok(())
}

impl MatchQueues {
    pub fn new(nranks: usize) -> Self {
        MatchQueues {
            posted: vec![VecDeque::new(); nranks],
            unexpected: vec![VecDeque::new(); nranks],
        }
    }

    /// Posts a receive at `dst`. Matches the earliest unexpected message
    /// with the same (source, tag), otherwise queues the receive.
    pub fn post_recv(&mut self, dst: Rank, recv: PostedRecv) -> Result<Option<Matched>, P2pError> {
        let unexpected = self.unexpected.get_mut(dst).ok_or(P2pError::UnknownRank(dst))?;
        let hit = unexpected
            .iter()
            .position(|m| m.envelope.src == recv.src && m.envelope.tag == recv.tag);
        match hit {
            Some(i) => {
                let msg = unexpected.remove(i).expect("index from position");
                check_fit(&recv, &msg)?;
                Ok(Some(Matched { recv, msg }))
            }
            None => {
                self.posted[dst].push_back(recv);
                Ok(None)
            }
        }
    }

    /// Delivers an arriving message. Matches the earliest posted receive,
    /// otherwise the message joins the unexpected list.
    pub fn arrive(&mut self, msg: Message) -> Result<Option<Matched>, P2pError> {
        let dst = msg.envelope.dst;
        let posted = self.posted.get_mut(dst).ok_or(P2pError::UnknownRank(dst))?;
        let hit = posted
            .iter()
            .position(|r| r.src == msg.envelope.src && r.tag == msg.envelope.tag);
        match hit {
            Some(i) => {
                let recv = posted.remove(i).expect("index from position");
                check_fit(&recv, &msg)?;
                Ok(Some(Matched { recv, msg }))
            }
            None => {
                self.unexpected[dst].push_back(msg);
                Ok(None)
            }
        }
    }

    pub fn posted(&self, rank: Rank) -> impl Iterator<Item = &PostedRecv> {
        self.posted[rank].iter()
    }

    pub fn unexpected(&self, rank: Rank) -> impl Iterator<Item = &Message> {
        self.unexpected[rank].iter()
    }
}
