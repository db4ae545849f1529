//! Message transports between adjacent stage workers.
//!
//! The default transport is an in-process ordered channel pair per
//! directed edge; numerics are bit-deterministic because each worker's
//! compute depends only on its inbox order, which is total per edge. The
//! optional framed-TCP transport carries the identical `PPMS` encoding
//! for the decentralised demonstration; message contents and per-edge
//! order are the same, so the numbers match the in-process run.
//!
//! A dropped endpoint (worker error) surfaces as `ChannelClosed` on the
//! peer, which the runtime maps to an abort; no poison messages needed.

use super::message::{MessageKind, PipeMessage};
use crate::error::{Error, Result};
use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;

/// Per-directed-edge message counts, by kind.
#[derive(Debug, Default)]
pub struct EdgeCounter {
    pub forward: AtomicU64,
    pub backward: AtomicU64,
    pub control: AtomicU64,
}

impl EdgeCounter {
    fn record(&self, kind: MessageKind) {
        match kind {
            MessageKind::Forward => self.forward.fetch_add(1, Ordering::Relaxed),
            MessageKind::Backward => self.backward.fetch_add(1, Ordering::Relaxed),
            MessageKind::Control => self.control.fetch_add(1, Ordering::Relaxed),
        };
    }
}

/// Snapshot of an edge counter after a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeStats {
    pub forward: u64,
    pub backward: u64,
    pub control: u64,
}

impl EdgeCounter {
    pub fn snapshot(&self) -> EdgeStats {
        EdgeStats {
            forward: self.forward.load(Ordering::Relaxed),
            backward: self.backward.load(Ordering::Relaxed),
            control: self.control.load(Ordering::Relaxed),
        }
    }
}

pub trait MessageTx: Send {
    fn send(&mut self, msg: PipeMessage) -> Result<()>;
}

pub trait MessageRx: Send {
    fn recv(&mut self) -> Result<PipeMessage>;
}

pub struct ChannelTx {
    tx: mpsc::Sender<PipeMessage>,
    counter: Arc<EdgeCounter>,
}

pub struct ChannelRx {
    rx: mpsc::Receiver<PipeMessage>,
}

/// One directed in-process edge plus its shared counter.
pub fn channel_edge() -> (ChannelTx, ChannelRx, Arc<EdgeCounter>) {
    let (tx, rx) = mpsc::channel();
    let counter = Arc::new(EdgeCounter::default());
    (ChannelTx { tx, counter: counter.clone() }, ChannelRx { rx }, counter)
}

impl MessageTx for ChannelTx {
    fn send(&mut self, msg: PipeMessage) -> Result<()> {
        self.counter.record(msg.kind);
        self.tx.send(msg).map_err(|_| Error::ChannelClosed)
    }
}

impl MessageRx for ChannelRx {
    fn recv(&mut self) -> Result<PipeMessage> {
        self.rx.recv().map_err(|_| Error::ChannelClosed)
    }
}

pub struct TcpTx {
    writer: BufWriter<TcpStream>,
    counter: Arc<EdgeCounter>,
}

pub struct TcpRx {
    reader: BufReader<TcpStream>,
}

impl MessageTx for TcpTx {
    fn send(&mut self, msg: PipeMessage) -> Result<()> {
        self.counter.record(msg.kind);
        msg.encode(&mut self.writer).map_err(map_closed)?;
        self.writer.flush().map_err(|e| map_closed(Error::Io(e)))?;
        Ok(())
    }
}

impl MessageRx for TcpRx {
    fn recv(&mut self) -> Result<PipeMessage> {
        PipeMessage::decode(&mut self.reader).map_err(map_closed)
    }
}

fn map_closed(e: Error) -> Error {
    match e {
        Error::Io(ioe)
            if matches!(
                ioe.kind(),
                std::io::ErrorKind::UnexpectedEof
                    | std::io::ErrorKind::BrokenPipe
                    | std::io::ErrorKind::ConnectionReset
                    | std::io::ErrorKind::ConnectionAborted
            ) =>
        {
            Error::ChannelClosed
        }
        other => other,
    }
}

/// One directed loopback-TCP edge, returned as connected endpoint pair.
pub fn tcp_edge() -> Result<(TcpTx, TcpRx, Arc<EdgeCounter>)> {
    let listener = TcpListener::bind(("127.0.0.1", 0))?;
    let addr = listener.local_addr()?;
    let sender = TcpStream::connect(addr)?;
    let (receiver, _) = listener.accept()?;
    sender.set_nodelay(true)?;
    receiver.set_nodelay(true)?;
    let counter = Arc::new(EdgeCounter::default());
    Ok((
        TcpTx { writer: BufWriter::new(sender), counter: counter.clone() },
        TcpRx { reader: BufReader::new(receiver) },
        counter,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    Tcp,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn msg(kind: MessageKind, iter: u32) -> PipeMessage {
        PipeMessage::new(kind, iter, 0, Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
    }

    #[test]
    fn channel_edge_preserves_order_and_counts() {
        let (mut tx, mut rx, counter) = channel_edge();
        tx.send(msg(MessageKind::Forward, 1)).unwrap();
        tx.send(msg(MessageKind::Forward, 2)).unwrap();
        tx.send(msg(MessageKind::Backward, 2)).unwrap();
        assert_eq!(rx.recv().unwrap().iteration, 1);
        assert_eq!(rx.recv().unwrap().iteration, 2);
        assert_eq!(rx.recv().unwrap().kind, MessageKind::Backward);
        let stats = counter.snapshot();
        assert_eq!((stats.forward, stats.backward, stats.control), (2, 1, 0));
    }

    #[test]
    fn dropped_receiver_surfaces_as_closed() {
        let (mut tx, rx, _) = channel_edge();
        drop(rx);
        assert!(matches!(tx.send(msg(MessageKind::Forward, 1)), Err(Error::ChannelClosed)));
    }

    #[test]
    fn tcp_edge_round_trips_messages() {
        let Ok((mut tx, mut rx, counter)) = tcp_edge() else {
            // loopback sockets unavailable in this environment
            return;
        };
        let original = msg(MessageKind::Forward, 7);
        tx.send(original.clone()).unwrap();
        let got = rx.recv().unwrap();
        assert_eq!(got, original);
        assert_eq!(counter.snapshot().forward, 1);
    }

    #[test]
    fn tcp_edge_close_surfaces_as_closed() {
        let Ok((tx, mut rx, _)) = tcp_edge() else {
            return;
        };
        drop(tx);
        assert!(matches!(rx.recv(), Err(Error::ChannelClosed)));
    }
}
