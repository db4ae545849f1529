//! Pipeline messages and their wire encoding.
//!
//! Framing: magic `PPMS`, u8 kind, u32 iteration, u16 microbatch, u8 ndim,
//! ndim x u32 dims, payload of little-endian f64, u32 CRC32 of the payload
//! bytes. The in-process transport carries the same struct without
//! serializing; the TCP transport uses this framing bit-for-bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};

pub const WIRE_MAGIC: &[u8; 4] = b"PPMS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    /// Boundary activations, stage i -> i+1.
    Forward = 0,
    /// Boundary gradients, stage i -> i-1.
    Backward = 1,
    /// Evaluation-pass activations (no backward), stage i -> i+1.
    Control = 2,
}

impl MessageKind {
    fn from_u8(v: u8) -> Result<MessageKind> {
        match v {
            0 => Ok(MessageKind::Forward),
            1 => Ok(MessageKind::Backward),
            2 => Ok(MessageKind::Control),
            other => Err(Error::Protocol {
                stage: usize::MAX,
                detail: format!("unknown message kind {other}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipeMessage {
    pub kind: MessageKind,
    pub iteration: u32,
    pub microbatch: u16,
    pub payload: Tensor,
    pub checksum: u32,
}

impl PipeMessage {
    pub fn new(kind: MessageKind, iteration: u32, microbatch: u16, payload: Tensor) -> Self {
        let checksum = payload_crc(&payload);
        PipeMessage { kind, iteration, microbatch, payload, checksum }
    }

    /// Replaces the payload and refreshes the checksum.
    pub fn with_payload(mut self, payload: Tensor) -> Self {
        self.checksum = payload_crc(&payload);
        self.payload = payload;
        self
    }

    pub fn verify_checksum(&self) -> bool {
        payload_crc(&self.payload) == self.checksum
    }

    pub fn encode(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(WIRE_MAGIC)?;
        w.write_all(&[self.kind as u8])?;
        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&self.microbatch.to_le_bytes())?;
        let shape = self.payload.shape();
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for x in self.payload.data() {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&self.checksum.to_le_bytes())?;
        Ok(())
    }

    pub fn decode(r: &mut impl Read) -> Result<PipeMessage> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WIRE_MAGIC {
            return Err(Error::Protocol {
                stage: usize::MAX,
                detail: format!("bad wire magic {magic:?}"),
            });
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let kind = MessageKind::from_u8(b1[0])?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let iteration = u32::from_le_bytes(b4);
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let microbatch = u16::from_le_bytes(b2);
        r.read_exact(&mut b1)?;
        let ndim = b1[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut b8 = [0u8; 8];
        for x in data.iter_mut() {
            r.read_exact(&mut b8)?;
            *x = f64::from_le_bytes(b8);
        }
        let payload = Tensor::from_op(shape, data);
        r.read_exact(&mut b4)?;
        let checksum = u32::from_le_bytes(b4);
        if payload_crc(&payload) != checksum {
            return Err(Error::Protocol {
                stage: usize::MAX,
                detail: "payload CRC mismatch".into(),
            });
        }
        Ok(PipeMessage { kind, iteration, microbatch, payload, checksum })
    }
}

/// CRC32 (IEEE, reflected 0xEDB88320) over the payload's little-endian
/// f64 bytes.
pub fn payload_crc(payload: &Tensor) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for x in payload.data() {
        for b in x.to_le_bytes() {
            crc = (crc >> 8) ^ CRC_TABLE[((crc ^ b as u32) & 0xFF) as usize];
        }
    }
    !crc
}

const CRC_TABLE: [u32; 256] = build_crc_table();

const fn build_crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}
