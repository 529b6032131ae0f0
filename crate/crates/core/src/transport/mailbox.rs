use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::frame::{Frame, MsgType};
use crate::error::{Error, Result};

type Key = (MsgType, usize, u32);

#[derive(Default)]
struct State {
    queues: HashMap<Key, VecDeque<Vec<u8>>>,
    closed: Vec<bool>,
    fault: Option<String>,
}

/// Incoming-frame demultiplexer for one rank. Frames are matched on
/// (msg_type, src, tag) and delivered FIFO per key.
pub(crate) struct Mailbox {
    state: Mutex<State>,
    arrived: Condvar,
}

impl Mailbox {
    pub fn new(world_size: usize) -> Self {
        Mailbox {
            state: Mutex::new(State {
                closed: vec![false; world_size],
                ..Default::default()
            }),
            arrived: Condvar::new(),
        }
    }

    pub fn push(&self, frame: Frame) {
        let mut st = self.state.lock().unwrap();
        st.queues
            .entry((frame.msg_type, frame.src_rank as usize, frame.tag))
            .or_default()
            .push_back(frame.payload);
        drop(st);
        self.arrived.notify_all();
    }

    /// Marks `src` as gone; pending frames from it stay deliverable.
    pub fn close(&self, src: usize) {
        let mut st = self.state.lock().unwrap();
        if let Some(c) = st.closed.get_mut(src) {
            *c = true;
        }
        drop(st);
        self.arrived.notify_all();
    }

    /// Records a stream-level fault (e.g. bad magic) that fails every later receive.
    pub fn fault(&self, src: usize, msg: String) {
        let mut st = self.state.lock().unwrap();
        st.fault.get_or_insert(msg);
        if let Some(c) = st.closed.get_mut(src) {
            *c = true;
        }
        drop(st);
        self.arrived.notify_all();
    }

    pub fn try_take(&self, kind: MsgType, src: usize, tag: u32) -> Option<Vec<u8>> {
        let mut st = self.state.lock().unwrap();
        pop(&mut st, (kind, src, tag))
    }

    pub fn take(&self, kind: MsgType, src: usize, tag: u32, deadline: Instant) -> Result<Vec<u8>> {
        let key = (kind, src, tag);
        let start = Instant::now();
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(p) = pop(&mut st, key) {
                return Ok(p);
            }
            if let Some(f) = &st.fault {
                return Err(Error::Protocol(f.clone()));
            }
            if st.closed.get(src).copied().unwrap_or(false) {
                return Err(Error::PeerDisconnected { rank: src });
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout {
                    what: format!("{kind:?} frame from rank {src} with tag {tag:#x}"),
                    millis: start.elapsed().as_millis(),
                });
            }
            let wait = (deadline - now).min(Duration::from_millis(500));
            st = self.arrived.wait_timeout(st, wait).unwrap().0;
        }
    }
}

fn pop(st: &mut State, key: Key) -> Option<Vec<u8>> {
    let q = st.queues.get_mut(&key)?;
    let p = q.pop_front();
    if q.is_empty() {
        st.queues.remove(&key);
    }
    p
}
