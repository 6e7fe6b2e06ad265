//! TCP transport for the hub's broker side.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::broker::{Action, ConnId};
use crate::hub::{Hub, HubError};
use crate::wire::MAX_LINE_BYTES;

pub const TICK_INTERVAL: Duration = Duration::from_millis(100);

enum Outgoing {
    Line(String),
    Close,
}

/// A hub shared between the broker transport and the HTTP API.
///
/// Every hub call goes through [`Node::with_hub`], which forwards the
/// resulting broker actions to connection writers while the hub lock is
/// still held, so frames leave in the order the engine produced them.
pub struct Node {
    hub: Mutex<Hub>,
    conns: Mutex<HashMap<ConnId, Sender<Outgoing>>>,
    next_conn: AtomicU64,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node").finish_non_exhaustive()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Node {
    pub fn new(hub: Hub) -> Arc<Node> {
        Arc::new(Node {
            hub: Mutex::new(hub),
            conns: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(1),
        })
    }

    pub fn with_hub<R>(&self, f: impl FnOnce(&mut Hub) -> R) -> R {
        let mut hub = lock(&self.hub);
        let out = f(&mut hub);
        let actions = hub.take_actions();
        self.dispatch(actions);
        out
    }

    fn dispatch(&self, actions: Vec<Action>) {
        if actions.is_empty() {
            return;
        }
        let mut conns = lock(&self.conns);
        for a in actions {
            match a {
                Action::Send(c, frame) => {
                    if let Some(tx) = conns.get(&c) {
                        let _ = tx.send(Outgoing::Line(frame.encode()));
                    }
                }
                Action::Close(c) => {
                    if let Some(tx) = conns.remove(&c) {
                        let _ = tx.send(Outgoing::Close);
                    }
                }
            }
        }
    }

    pub fn connection_count(&self) -> usize {
        lock(&self.conns).len()
    }

    fn register(&self, stream: &TcpStream) -> io::Result<(ConnId, mpsc::Receiver<Outgoing>)> {
        let conn = self.next_conn.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        stream.set_nodelay(true)?;
        lock(&self.conns).insert(conn, tx);
        self.with_hub(|h| h.open_conn(conn));
        Ok((conn, rx))
    }

    fn unregister(&self, conn: ConnId) {
        if let Some(tx) = lock(&self.conns).remove(&conn) {
            let _ = tx.send(Outgoing::Close);
        }
        self.with_hub(|h| h.close_conn(conn));
    }

    fn close_all(&self) {
        for (_, tx) in lock(&self.conns).drain() {
            let _ = tx.send(Outgoing::Close);
        }
    }
}

/// Running broker listener plus the housekeeping ticker.
#[derive(Debug)]
pub struct BrokerServer {
    node: Arc<Node>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl BrokerServer {
    /// Starts accepting on `listener` in background threads.
    pub fn spawn(node: Arc<Node>, listener: TcpListener) -> io::Result<BrokerServer> {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let (node, stop) = (node.clone(), stop.clone());
            thread::Builder::new()
                .name("broker-accept".into())
                .spawn(move || accept_loop(node, listener, stop))?
        };
        let ticker = {
            let (node, stop) = (node.clone(), stop.clone());
            thread::Builder::new().name("hub-tick".into()).spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    thread::sleep(TICK_INTERVAL);
                    node.with_hub(Hub::tick);
                }
            })?
        };
        Ok(BrokerServer {
            node,
            addr,
            stop,
            threads: vec![accept, ticker],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    /// Stops accepting, drops every connection and writes a final snapshot.
    pub fn shutdown(mut self) -> Result<(), HubError> {
        self.halt();
        self.node.with_hub(Hub::flush)
    }

    /// Stops all threads without the final flush, like a crash would.
    pub fn abort(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        self.node.close_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.halt();
    }
}

fn accept_loop(node: Arc<Node>, listener: TcpListener, stop: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(s) => {
                if let Err(e) = start_connection(node.clone(), s) {
                    tracing::warn!(error = %e, "could not set up connection");
                }
            }
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn start_connection(node: Arc<Node>, stream: TcpStream) -> io::Result<()> {
    let peer = stream.peer_addr().ok();
    let (conn, rx) = node.register(&stream)?;
    tracing::debug!(conn, ?peer, "connection opened");
    let mut writer = stream.try_clone()?;
    thread::Builder::new()
        .name(format!("conn-{conn}-w"))
        .spawn(move || {
            for msg in rx {
                match msg {
                    Outgoing::Line(mut line) => {
                        line.push('\n');
                        if writer.write_all(line.as_bytes()).is_err() {
                            break;
                        }
                    }
                    Outgoing::Close => break,
                }
            }
            let _ = writer.shutdown(Shutdown::Both);
        })?;
    thread::Builder::new()
        .name(format!("conn-{conn}-r"))
        .spawn(move || {
            read_lines(&node, conn, stream);
            node.unregister(conn);
            tracing::debug!(conn, "connection closed");
        })?;
    Ok(())
}

fn read_lines(node: &Node, conn: ConnId, stream: TcpStream) {
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let limit = (MAX_LINE_BYTES + 2) as u64;
        match (&mut reader).take(limit).read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
        let complete = buf.last() == Some(&b'\n');
        if !complete && buf.len() as u64 != limit {
            return; // EOF inside a line
        }
        while matches!(buf.last(), Some(b'\n' | b'\r')) {
            buf.pop();
        }
        if buf.is_empty() {
            continue;
        }
        let line = String::from_utf8_lossy(&buf);
        node.with_hub(|h| h.on_line(conn, &line));
        if !complete {
            // Oversized line: the hub has rejected it and asked for a close.
            return;
        }
    }
}
