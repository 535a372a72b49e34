//! Line transports shared by the node and station: in-process channels and
//! local TCP streams. Both carry the same encoded lines.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::{self, JoinHandle};

use crossbeam_channel::{unbounded, Receiver, Sender};

use crate::geom::DroneId;
use crate::swarm::protocol::{decode, ProtocolMessage, Sender as MsgSender};

pub trait LineSink: Send {
    fn send_line(&mut self, line: &str) -> io::Result<()>;

    /// Tries to re-establish a lost link. Returns true when it is usable again.
    fn reconnect(&mut self) -> bool {
        false
    }
}

pub struct ChannelSink(pub Sender<String>);

impl LineSink for ChannelSink {
    fn send_line(&mut self, line: &str) -> io::Result<()> {
        self.0
            .send(line.to_owned())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "receiver dropped"))
    }
}

/// A sink plus the receiving end it feeds.
pub fn channel_pair() -> (ChannelSink, Receiver<String>) {
    let (tx, rx) = unbounded();
    (ChannelSink(tx), rx)
}

fn spawn_reader(stream: TcpStream, tx: Sender<String>) -> JoinHandle<()> {
    thread::spawn(move || {
        for line in BufReader::new(stream).lines() {
            match line {
                Ok(l) => {
                    if tx.send(l).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    log::debug!("tcp reader stopped: {e}");
                    break;
                }
            }
        }
    })
}

/// Writes lines to a TCP stream, newline terminated.
pub struct TcpSink {
    stream: Option<TcpStream>,
    peer: Option<SocketAddr>,
    inbox: Option<Sender<String>>,
}

impl TcpSink {
    fn from_stream(stream: TcpStream) -> Self {
        Self {
            stream: Some(stream),
            peer: None,
            inbox: None,
        }
    }
}

impl LineSink for TcpSink {
    fn send_line(&mut self, line: &str) -> io::Result<()> {
        let stream = self
            .stream
            .as_mut()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotConnected, "link down"))?;
        let res = stream
            .write_all(line.as_bytes())
            .and_then(|_| stream.write_all(b"\n"))
            .and_then(|_| stream.flush());
        if res.is_err() {
            self.stream = None;
        }
        res
    }

    fn reconnect(&mut self) -> bool {
        let (Some(peer), Some(inbox)) = (self.peer, self.inbox.clone()) else {
            return false;
        };
        match TcpStream::connect(peer).and_then(|s| s.try_clone().map(|r| (s, r))) {
            Ok((s, r)) => {
                let _ = s.set_nodelay(true);
                spawn_reader(r, inbox);
                self.stream = Some(s);
                true
            }
            Err(e) => {
                log::debug!("reconnect to {peer} failed: {e}");
                false
            }
        }
    }
}

/// Connects a node to the station. Incoming lines arrive on the receiver.
pub fn connect_tcp(addr: SocketAddr) -> io::Result<(TcpSink, Receiver<String>)> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let (tx, rx) = unbounded();
    spawn_reader(stream.try_clone()?, tx.clone());
    Ok((
        TcpSink {
            stream: Some(stream),
            peer: Some(addr),
            inbox: Some(tx),
        },
        rx,
    ))
}

/// A station-side connection, identified by the drone's Hello line.
pub struct Connection {
    pub drone: DroneId,
    pub sink: TcpSink,
}

/// Accepts node connections on `listener`. Each connection's first line must
/// be a drone's Hello; it is forwarded into `inbox` like every later line,
/// and the writer half is handed to the station through the returned channel.
pub fn serve_tcp(listener: TcpListener, inbox: Sender<String>) -> Receiver<Connection> {
    let (conn_tx, conn_rx) = unbounded();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let _ = stream.set_nodelay(true);
            let inbox = inbox.clone();
            let conn_tx = conn_tx.clone();
            thread::spawn(move || {
                let Ok(read_half) = stream.try_clone() else {
                    return;
                };
                let mut reader = BufReader::new(read_half);
                let mut first = String::new();
                if reader.read_line(&mut first).unwrap_or(0) == 0 {
                    return;
                }
                let drone = match decode(&first) {
                    Ok(env) => match (env.sender, env.msg) {
                        (MsgSender::Drone(d), ProtocolMessage::Hello { .. }) => d,
                        _ => {
                            log::warn!("connection did not open with a drone Hello; closing");
                            return;
                        }
                    },
                    Err(e) => {
                        log::warn!("dropping connection with malformed first line: {e}");
                        return;
                    }
                };
                if conn_tx
                    .send(Connection {
                        drone,
                        sink: TcpSink::from_stream(stream),
                    })
                    .is_err()
                {
                    return;
                }
                if inbox.send(first.trim_end().to_owned()).is_err() {
                    return;
                }
                for line in reader.lines() {
                    match line {
                        Ok(l) => {
                            if inbox.send(l).is_err() {
                                break;
                            }
                        }
                        Err(_) => break,
                    }
                }
            });
        }
    });
    conn_rx
}
