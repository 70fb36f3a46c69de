//! Client/server framing.
//!
//! ```text
//! "SCBF" | version u8 | type u8 | payload length u32 LE | payload
//! ```
//!
//! Every payload except `RoundAck` (empty) opens with a `u32` layer count.
//! All integers are little-endian; weights travel as IEEE-754 `f32`.

use std::io::{self, Read, Write};

use crate::channel::{SparseEntry, SparseUpdate};
use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::pruning::PruneDirective;
use crate::tensor::DenseMatrix;

pub const MAGIC: [u8; 4] = *b"SCBF";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 10;
/// Frames larger than this are rejected before allocation.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    ServerWeights = 0x01,
    ClientUpdate = 0x02,
    PruneDirective = 0x03,
    RoundAck = 0x04,
}

impl TryFrom<u8> for MessageType {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        match b {
            0x01 => Ok(MessageType::ServerWeights),
            0x02 => Ok(MessageType::ClientUpdate),
            0x03 => Ok(MessageType::PruneDirective),
            0x04 => Ok(MessageType::RoundAck),
            other => Err(Error::Wire(format!("unknown message type 0x{other:02x}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub rows: u32,
    pub cols: u32,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireEntry {
    pub row: u32,
    pub col: u32,
    pub value: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    ServerWeights(Vec<DenseLayer>),
    ClientUpdate(Vec<Vec<WireEntry>>),
    PruneDirective(Vec<Vec<u32>>),
    RoundAck,
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::ServerWeights(_) => MessageType::ServerWeights,
            Message::ClientUpdate(_) => MessageType::ClientUpdate,
            Message::PruneDirective(_) => MessageType::PruneDirective,
            Message::RoundAck => MessageType::RoundAck,
        }
    }

    pub fn server_weights(model: &MlpModel) -> Self {
        Message::ServerWeights(
            model
                .weights()
                .iter()
                .zip(model.biases())
                .map(|(w, b)| DenseLayer {
                    rows: w.rows() as u32,
                    cols: w.cols() as u32,
                    weights: w.as_slice().iter().map(|&v| v as f32).collect(),
                    biases: b.iter().map(|&v| v as f32).collect(),
                })
                .collect(),
        )
    }

    pub fn client_update(update: &SparseUpdate) -> Self {
        Message::ClientUpdate(
            update
                .layers
                .iter()
                .map(|entries| {
                    entries
                        .iter()
                        .map(|e| WireEntry {
                            row: e.row as u32,
                            col: e.col as u32,
                            value: e.value as f32,
                        })
                        .collect()
                })
                .collect(),
        )
    }

    pub fn prune_directive(directive: &PruneDirective) -> Self {
        Message::PruneDirective(
            directive
                .layers
                .iter()
                .map(|l| l.iter().map(|&i| i as u32).collect())
                .collect(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        match self {
            Message::ServerWeights(layers) => {
                put_u32(&mut payload, layers.len() as u32);
                for layer in layers {
                    put_u32(&mut payload, layer.rows);
                    put_u32(&mut payload, layer.cols);
                    for &v in layer.weights.iter().chain(&layer.biases) {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            Message::ClientUpdate(layers) => {
                put_u32(&mut payload, layers.len() as u32);
                for entries in layers {
                    put_u32(&mut payload, entries.len() as u32);
                    for e in entries {
                        put_u32(&mut payload, e.row);
                        put_u32(&mut payload, e.col);
                        payload.extend_from_slice(&e.value.to_le_bytes());
                    }
                }
            }
            Message::PruneDirective(layers) => {
                put_u32(&mut payload, layers.len() as u32);
                for indices in layers {
                    put_u32(&mut payload, indices.len() as u32);
                    for &i in indices {
                        put_u32(&mut payload, i);
                    }
                }
            }
            Message::RoundAck => {}
        }
        let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
        frame.extend_from_slice(&MAGIC);
        frame.push(VERSION);
        frame.push(self.message_type() as u8);
        put_u32(&mut frame, payload.len() as u32);
        frame.extend_from_slice(&payload);
        frame
    }

    /// Decodes exactly one complete frame.
    pub fn decode(frame: &[u8]) -> Result<Self> {
        if frame.len() < HEADER_LEN {
            return Err(Error::Wire(format!("frame of {} bytes is shorter than the header", frame.len())));
        }
        let (kind, len) = parse_header(frame[..HEADER_LEN].try_into().expect("header slice"))?;
        let payload = &frame[HEADER_LEN..];
        if payload.len() != len as usize {
            return Err(Error::Wire(format!(
                "header announces {len} payload bytes, frame carries {}",
                payload.len()
            )));
        }
        decode_payload(kind, payload)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn parse_header(header: &[u8; HEADER_LEN]) -> Result<(MessageType, u32)> {
    if header[..4] != MAGIC {
        return Err(Error::Wire(format!("bad magic {:?}", &header[..4])));
    }
    if header[4] != VERSION {
        return Err(Error::Wire(format!("unsupported version {}", header[4])));
    }
    let kind = MessageType::try_from(header[5])?;
    let len = u32::from_le_bytes(header[6..10].try_into().expect("4 bytes"));
    if len > MAX_PAYLOAD {
        return Err(Error::Wire(format!("payload length {len} exceeds limit")));
    }
    Ok((kind, len))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Wire("payload truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    /// Reads a count and checks that at least `count * unit` bytes remain.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(Error::Wire(format!("count {n} overruns payload")));
        }
        Ok(n)
    }
}

fn decode_payload(kind: MessageType, payload: &[u8]) -> Result<Message> {
    let mut cur = Cursor { buf: payload, pos: 0 };
    let msg = match kind {
        MessageType::RoundAck => Message::RoundAck,
        MessageType::ServerWeights => {
            let n_layers = cur.count(8)?;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let rows = cur.u32()?;
                let cols = cur.u32()?;
                let n = (rows as usize)
                    .checked_mul(cols as usize)
                    .ok_or_else(|| Error::Wire("layer size overflow".into()))?;
                if n.saturating_add(cols as usize).saturating_mul(4) > payload.len() - cur.pos {
                    return Err(Error::Wire(format!("{rows}x{cols} layer overruns payload")));
                }
                let weights = (0..n).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
                let biases = (0..cols).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
                layers.push(DenseLayer {
                    rows,
                    cols,
                    weights,
                    biases,
                });
            }
            Message::ServerWeights(layers)
        }
        MessageType::ClientUpdate => {
            let n_layers = cur.count(4)?;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let n = cur.count(12)?;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    entries.push(WireEntry {
                        row: cur.u32()?,
                        col: cur.u32()?,
                        value: cur.f32()?,
                    });
                }
                layers.push(entries);
            }
            Message::ClientUpdate(layers)
        }
        MessageType::PruneDirective => {
            let n_layers = cur.count(4)?;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let n = cur.count(4)?;
                layers.push((0..n).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?);
            }
            Message::PruneDirective(layers)
        }
    };
    if cur.pos != payload.len() {
        return Err(Error::Wire(format!(
            "{} trailing payload bytes",
            payload.len() - cur.pos
        )));
    }
    Ok(msg)
}

pub fn write_message(out: &mut impl Write, msg: &Message) -> Result<()> {
    out.write_all(&msg.encode())?;
    out.flush()?;
    Ok(())
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream before any
/// header byte.
pub fn read_message(input: &mut impl Read) -> Result<Option<Message>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match input.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Wire("stream closed inside frame header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (kind, len) = parse_header(&header)?;
    let mut payload = vec![0u8; len as usize];
    input.read_exact(&mut payload)?;
    decode_payload(kind, &payload).map(Some)
}

/// Converts received dense layers into `(weights, biases)`.
pub fn dense_layers_to_parameters(layers: &[DenseLayer]) -> Result<(Vec<DenseMatrix>, Vec<Vec<f64>>)> {
    let mut weights = Vec::with_capacity(layers.len());
    let mut biases = Vec::with_capacity(layers.len());
    for layer in layers {
        weights.push(DenseMatrix::from_vec(
            layer.rows as usize,
            layer.cols as usize,
            layer.weights.iter().map(|&v| f64::from(v)).collect(),
        )?);
        biases.push(layer.biases.iter().map(|&v| f64::from(v)).collect());
    }
    Ok((weights, biases))
}

/// Rebuilds a sparse update against the receiver's layer shapes, rejecting
/// out-of-range or duplicate coordinates.
pub fn entries_to_update(layers: &[Vec<WireEntry>], shapes: &[(usize, usize)]) -> Result<SparseUpdate> {
    if layers.len() != shapes.len() {
        return Err(Error::shape(format!(
            "update has {} layers, model has {}",
            layers.len(),
            shapes.len()
        )));
    }
    let update = SparseUpdate {
        layers: layers
            .iter()
            .map(|entries| {
                entries
                    .iter()
                    .map(|e| SparseEntry {
                        row: e.row as usize,
                        col: e.col as usize,
                        value: f64::from(e.value),
                    })
                    .collect()
            })
            .collect(),
        shapes: shapes.to_vec(),
    };
    update.validate()?;
    Ok(update)
}

pub fn indices_to_directive(layers: &[Vec<u32>]) -> PruneDirective {
    PruneDirective {
        layers: layers
            .iter()
            .map(|l| l.iter().map(|&i| i as usize).collect())
            .collect(),
    }
}
