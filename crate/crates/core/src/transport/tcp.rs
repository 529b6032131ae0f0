//! TCP backend. Every pair of ranks shares one full-duplex connection:
//! rank `r` dials every lower rank and accepts from every higher rank, so
//! rank 0 is the first rendezvous point for everybody. Both sides of a new
//! connection exchange a handshake frame carrying the sender's world size.

use std::io::{self, BufReader, ErrorKind};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::frame::{Frame, MsgType};
use super::mailbox::Mailbox;
use super::{Endpoint, Link, TransportConfig};
use crate::error::{Error, Result};

struct TcpLink {
    writers: Vec<Option<Mutex<TcpStream>>>,
    readers: Mutex<Vec<JoinHandle<()>>>,
}

impl Link for TcpLink {
    fn deliver(&self, dst: usize, frame: Frame) -> Result<()> {
        let writer = self.writers[dst]
            .as_ref()
            .ok_or(Error::PeerDisconnected { rank: dst })?;
        let mut stream = writer.lock().unwrap();
        frame.write_to(&mut *stream)?;
        Ok(())
    }

    fn backend(&self) -> &'static str {
        "tcp"
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        for w in self.writers.iter().flatten() {
            let _ = w.lock().unwrap().shutdown(Shutdown::Both);
        }
        for h in self.readers.lock().unwrap().drain(..) {
            let _ = h.join();
        }
    }
}

/// Binds `addrs[rank]` and connects to every other address.
pub fn tcp_endpoint(rank: usize, addrs: &[String], config: TransportConfig) -> Result<Endpoint> {
    if rank >= addrs.len() {
        return Err(Error::config(format!(
            "rank {rank} has no address among {} peers",
            addrs.len()
        )));
    }
    let listener = TcpListener::bind(&addrs[rank])?;
    tcp_endpoint_with_listener(rank, listener, addrs, config)
}

/// Like [`tcp_endpoint`] but with an already bound listener, which lets
/// callers reserve ephemeral ports before any rank starts dialing.
pub fn tcp_endpoint_with_listener(
    rank: usize,
    listener: TcpListener,
    addrs: &[String],
    config: TransportConfig,
) -> Result<Endpoint> {
    let world_size = addrs.len();
    if rank >= world_size {
        return Err(Error::config(format!(
            "rank {rank} outside world of size {world_size}"
        )));
    }
    let deadline = Instant::now() + config.timeout;
    let mut streams: Vec<Option<TcpStream>> = (0..world_size).map(|_| None).collect();

    for peer in 0..rank {
        let mut stream = dial(&addrs[peer], deadline)?;
        stream.set_nodelay(true)?;
        send_handshake(&mut stream, rank, world_size)?;
        let (src, their_size) = read_handshake(&mut stream, deadline)?;
        if src != peer {
            return Err(Error::protocol(format!(
                "dialed rank {peer} at {} but rank {src} answered",
                addrs[peer]
            )));
        }
        check_world(their_size, world_size, src)?;
        streams[peer] = Some(stream);
    }

    listener.set_nonblocking(true)?;
    let mut pending = world_size - rank - 1;
    while pending > 0 {
        let mut stream = match listener.accept() {
            Ok((s, _)) => s,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let missing: Vec<usize> = (rank + 1..world_size)
                        .filter(|&r| streams[r].is_none())
                        .collect();
                    return Err(Error::Timeout {
                        what: format!("handshake from ranks {missing:?}"),
                        millis: config.timeout.as_millis(),
                    });
                }
                thread::sleep(Duration::from_millis(5));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        stream.set_nonblocking(false)?;
        stream.set_nodelay(true)?;
        let (src, their_size) = read_handshake(&mut stream, deadline)?;
        send_handshake(&mut stream, rank, world_size)?;
        check_world(their_size, world_size, src)?;
        if src <= rank || src >= world_size || streams[src].is_some() {
            return Err(Error::protocol(format!(
                "unexpected handshake from rank {src} at rank {rank}"
            )));
        }
        streams[src] = Some(stream);
        pending -= 1;
    }

    let mailbox = Arc::new(Mailbox::new(world_size));
    let mut writers = Vec::with_capacity(world_size);
    let mut readers = Vec::new();
    for (peer, stream) in streams.into_iter().enumerate() {
        match stream {
            None => writers.push(None),
            Some(stream) => {
                stream.set_read_timeout(None)?;
                let read_half = stream.try_clone()?;
                let mb = Arc::clone(&mailbox);
                readers.push(
                    thread::Builder::new()
                        .name(format!("gflow-rx-{rank}<-{peer}"))
                        .spawn(move || pump(read_half, peer, mb))?,
                );
                writers.push(Some(Mutex::new(stream)));
            }
        }
    }
    let link = TcpLink {
        writers,
        readers: Mutex::new(readers),
    };
    Ok(Endpoint::new(rank, world_size, config, mailbox, Box::new(link)))
}

fn pump(stream: TcpStream, peer: usize, mailbox: Arc<Mailbox>) {
    let mut reader = BufReader::with_capacity(1 << 16, stream);
    loop {
        match Frame::read_from(&mut reader) {
            Ok(frame) if frame.src_rank as usize == peer => mailbox.push(frame),
            Ok(frame) => {
                mailbox.fault(
                    peer,
                    format!(
                        "connection to rank {peer} carried a frame from rank {}",
                        frame.src_rank
                    ),
                );
                return;
            }
            Err(Error::Io(_)) => {
                mailbox.close(peer);
                return;
            }
            Err(e) => {
                mailbox.fault(peer, e.to_string());
                return;
            }
        }
    }
}

fn dial(addr: &str, deadline: Instant) -> Result<TcpStream> {
    let target = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| Error::config(format!("address {addr} did not resolve")))?;
    loop {
        match TcpStream::connect_timeout(&target, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(Error::Io(io::Error::new(
                        e.kind(),
                        format!("could not reach {addr}: {e}"),
                    )));
                }
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

fn send_handshake(stream: &mut TcpStream, rank: usize, world_size: usize) -> Result<()> {
    Frame::new(
        MsgType::Handshake,
        0,
        rank as u32,
        (world_size as u64).to_le_bytes().to_vec(),
    )
    .write_to(stream)
}

fn read_handshake(stream: &mut TcpStream, deadline: Instant) -> Result<(usize, usize)> {
    let left = deadline
        .saturating_duration_since(Instant::now())
        .max(Duration::from_millis(10));
    stream.set_read_timeout(Some(left))?;
    let frame = Frame::read_from(stream)?;
    if frame.msg_type != MsgType::Handshake || frame.payload.len() != 8 {
        return Err(Error::protocol("malformed handshake frame"));
    }
    let size = u64::from_le_bytes(frame.payload[..8].try_into().unwrap()) as usize;
    Ok((frame.src_rank as usize, size))
}

fn check_world(theirs: usize, ours: usize, peer: usize) -> Result<()> {
    if theirs != ours {
        return Err(Error::protocol(format!(
            "rank {peer} reports world size {theirs}, expected {ours}"
        )));
    }
    Ok(())
}
