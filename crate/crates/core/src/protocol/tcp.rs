use std::collections::BTreeMap;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use super::{Action, Collaborator, CollaboratorStats, Event, ProtocolError, Requester, RequesterReport};
use crate::transport::{tcp_connect, FramedStream, ProtocolMessage, WireError};
use crate::DeviceId;

/// Serves one requester connection until it closes or the collaborator
/// closes it. Frames that fail to decode become protocol errors; a broken
/// frame boundary ends the session.
pub fn serve_collaborator_tcp(
    listener: &TcpListener,
    peer: DeviceId,
    collaborator: &mut Collaborator,
) -> Result<CollaboratorStats, ProtocolError> {
    let (stream, _) = listener.accept().map_err(WireError::from)?;
    stream.set_nodelay(true).map_err(WireError::from)?;
    let mut framed = FramedStream::new(stream);
    loop {
        let (event, fatal) = match framed.read_frame() {
            Ok(None) => break,
            Ok(Some(frame)) => match ProtocolMessage::from_frame(&frame) {
                Ok(msg) => (Event::Deliver { from: peer, msg }, false),
                Err(error) => (Event::Malformed { from: peer, error }, false),
            },
            Err(WireError::Io(_)) | Err(WireError::Truncated { .. }) => break,
            Err(error) => (Event::Malformed { from: peer, error }, true),
        };
        let now = collaborator.clock();
        for action in collaborator.handle(event, now)? {
            if let Action::Send { msg, .. } = action {
                framed.send(&msg)?;
            }
        }
        if fatal || collaborator.all_closed() {
            break;
        }
    }
    let _ = framed.get_ref().shutdown(Shutdown::Write);
    Ok(collaborator.stats())
}

type Inbound = (DeviceId, Result<Option<ProtocolMessage>, WireError>);

/// Drives `requester` against collaborators listening at `peers`. Response
/// deadlines are enforced in wall time; unreachable peers simply never
/// answer.
pub fn run_requester_tcp(
    requester: &mut Requester,
    peers: &[(DeviceId, SocketAddr)],
) -> Result<RequesterReport, ProtocolError> {
    let (tx, rx) = mpsc::channel::<Inbound>();
    let mut writers: BTreeMap<DeviceId, FramedStream<TcpStream>> = BTreeMap::new();
    let mut readers = Vec::new();
    for &(id, addr) in peers {
        let Ok(stream) = tcp_connect(addr) else { continue };
        let Ok(read_half) = stream.get_ref().try_clone() else { continue };
        let tx = tx.clone();
        readers.push(thread::spawn(move || {
            let mut framed = FramedStream::new(read_half);
            loop {
                let item = framed.read_frame().and_then(|f| f.map(|f| ProtocolMessage::from_frame(&f)).transpose());
                let stop = !matches!(item, Ok(Some(_)));
                if tx.send((id, item)).is_err() || stop {
                    break;
                }
            }
        }));
        writers.insert(id, stream);
    }
    drop(tx);

    let mut deadlines: BTreeMap<u64, Instant> = BTreeMap::new();
    let mut apply = |actions: Vec<Action>, clock: f64, deadlines: &mut BTreeMap<u64, Instant>| {
        for action in actions {
            match action {
                Action::Send { to, msg, .. } => {
                    if let Some(w) = writers.get_mut(&to) {
                        // A failed write surfaces as a missed deadline.
                        let _ = w.send(&msg);
                    }
                }
                Action::SetTimer { id, at } => {
                    let wait = Duration::from_secs_f64((at - clock).max(0.0));
                    deadlines.insert(id, Instant::now() + wait);
                }
            }
        }
    };

    let clock = requester.clock();
    let actions = requester.handle(Event::Start, clock)?;
    apply(actions, requester.clock(), &mut deadlines);
    let mut open = peers.len();
    while !requester.is_done() {
        let next = deadlines.iter().min_by_key(|(_, at)| **at).map(|(id, at)| (*id, *at));
        let received = match next {
            Some((_, at)) => rx.recv_timeout(at.saturating_duration_since(Instant::now())),
            None if open > 0 => rx.recv().map_err(|_| mpsc::RecvTimeoutError::Disconnected),
            None => break,
        };
        let event = match received {
            Ok((from, Ok(Some(msg)))) => Event::Deliver { from, msg },
            Ok((from, Err(error))) if !matches!(error, WireError::Io(_) | WireError::Truncated { .. }) => {
                open -= 1;
                Event::Malformed { from, error }
            }
            Ok(_) => {
                open -= 1;
                continue;
            }
            Err(mpsc::RecvTimeoutError::Timeout) | Err(mpsc::RecvTimeoutError::Disconnected) => {
                let Some((id, at)) = next else { break };
                if Instant::now() < at {
                    // Every reader is gone; nothing but the deadline can happen.
                    thread::sleep(at.saturating_duration_since(Instant::now()));
                }
                deadlines.remove(&id);
                Event::Timer { id }
            }
        };
        let clock = requester.clock();
        let actions = requester.handle(event, clock)?;
        apply(actions, requester.clock(), &mut deadlines);
    }
    for w in writers.values() {
        let _ = w.get_ref().shutdown(Shutdown::Both);
    }
    for r in readers {
        let _ = r.join();
    }
    Ok(requester.report())
}
