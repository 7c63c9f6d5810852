//! Alice and Bob as explicit state machines exchanging framed messages over
//! an ordered, reliable, authenticated channel.
//!
//! Per block, the quantum transmission comes first; Bob's disclosure is the
//! acknowledgement that his measurement finished and Alice only answers it
//! afterwards. After the last block an `End` pair closes the exchange, then
//! key generation runs: sift announcement, syndrome, verification hash and
//! privacy-amplification seed.
//!
//! Wire format: every frame is a little-endian `u32` length covering the tag
//! byte and payload, the tag, then the fields. Counts are `u64` LE and bit
//! strings are a `u64` bit length followed by their LSB-first packed bytes.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    expected_observables, security_result, ExpectedObservables, Observables, SecurityResult,
};
use crate::channel::{
    draw_alice_settings, draw_bob_basis, AliceSettings, ChannelModel, Detection, OpticalPulse,
    Physics, RoundOutcome,
};
use crate::error::{Error, Result};
use crate::params::{Basis, Intensity, PerIntensity, ProtocolConstants};
use crate::postprocessing::{
    ec_decode, ec_syndrome, n_ec, pa_hash, verify_hash, BitString, EcCode, EcOptions, ToeplitzSeed,
};
use crate::rng::{stream, StreamRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Alice,
    Bob,
}

/// Bob's public record of one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BobRound {
    pub clicked: bool,
    pub beta: Basis,
    pub b: Option<u8>,
}

impl BobRound {
    /// The disclosure for a measurement: the bit only travels for X-basis clicks.
    pub fn disclose(beta: Basis, detection: Detection) -> Self {
        let b = match (beta, detection) {
            (Basis::X, Detection::Click(b)) => Some(b),
            _ => None,
        };
        BobRound { clicked: detection.clicked(), beta, b }
    }
}

/// Alice's public record of one detected round, `index` counted within the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AliceRound {
    pub index: u64,
    pub omega: Intensity,
    pub alpha: Basis,
    pub a: Option<u8>,
}

impl AliceRound {
    pub fn disclose(index: u64, s: &AliceSettings) -> Self {
        let a = (s.alpha == Basis::X).then_some(s.a_bit);
        AliceRound { index, omega: s.omega, alpha: s.alpha, a }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BobDisclosure {
    pub block: u64,
    pub rounds: Vec<BobRound>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliceDisclosure {
    pub block: u64,
    pub rounds: Vec<AliceRound>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    BobBlockDisclosure(BobDisclosure),
    AliceBlockDisclosure(AliceDisclosure),
    SiftAnnounce { n_sift: u64, proceed: bool },
    Syndrome(BitString),
    VerifyHash { r: u64, hash: BitString },
    VerifyResult { equal: bool },
    PaSeed { r: u64, n_fin: u64 },
    End { ack: bool },
}

const TAG_BOB: u8 = 1;
const TAG_ALICE: u8 = 2;
const TAG_SIFT: u8 = 3;
const TAG_SYNDROME: u8 = 4;
const TAG_VERIFY_HASH: u8 = 5;
const TAG_VERIFY_RESULT: u8 = 6;
const TAG_PA_SEED: u8 = 7;
const TAG_END: u8 = 8;

const BOB_CLICK: u8 = 1;
const BOB_BETA_X: u8 = 1 << 1;
const BOB_HAS_B: u8 = 1 << 2;
const BOB_B: u8 = 1 << 3;
const ALICE_OMEGA: u8 = 0b11;
const ALICE_ALPHA_X: u8 = 1 << 2;
const ALICE_HAS_A: u8 = 1 << 3;
const ALICE_A: u8 = 1 << 4;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bits(out: &mut Vec<u8>, b: &BitString) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(&b.to_bytes());
}

fn basis_flag(b: Basis, flag: u8) -> u8 {
    if b == Basis::X {
        flag
    } else {
        0
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Wire(format!("frame truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Wire(format!("flag byte {v}"))),
        }
    }

    /// A count used to size an allocation; it may not exceed the bytes left.
    fn count(&mut self, bytes_each: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(bytes_each as u64) > left {
            return Err(Error::Wire(format!("count {n} exceeds the frame")));
        }
        Ok(n as usize)
    }

    fn bits(&mut self) -> Result<BitString> {
        let len = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if len.div_ceil(8) > left {
            return Err(Error::Wire(format!("bit string of {len} bits exceeds the frame")));
        }
        let len = len as usize;
        BitString::from_bytes(self.take(len.div_ceil(8))?, len).map_err(|e| Error::Wire(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Wire(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::BobBlockDisclosure(_) => TAG_BOB,
            Message::AliceBlockDisclosure(_) => TAG_ALICE,
            Message::SiftAnnounce { .. } => TAG_SIFT,
            Message::Syndrome(_) => TAG_SYNDROME,
            Message::VerifyHash { .. } => TAG_VERIFY_HASH,
            Message::VerifyResult { .. } => TAG_VERIFY_RESULT,
            Message::PaSeed { .. } => TAG_PA_SEED,
            Message::End { .. } => TAG_END,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::BobBlockDisclosure(_) => "BobBlockDisclosure",
            Message::AliceBlockDisclosure(_) => "AliceBlockDisclosure",
            Message::SiftAnnounce { .. } => "SiftAnnounce",
            Message::Syndrome(_) => "Syndrome",
            Message::VerifyHash { .. } => "VerifyHash",
            Message::VerifyResult { .. } => "VerifyResult",
            Message::PaSeed { .. } => "PaSeed",
            Message::End { .. } => "End",
        }
    }

    pub fn to_frame(&self) -> Vec<u8> {
        let mut body = vec![self.tag()];
        match self {
            Message::BobBlockDisclosure(d) => {
                put_u64(&mut body, d.block);
                put_u64(&mut body, d.rounds.len() as u64);
                for r in &d.rounds {
                    let mut f = basis_flag(r.beta, BOB_BETA_X);
                    if r.clicked {
                        f |= BOB_CLICK;
                    }
                    if let Some(b) = r.b {
                        f |= BOB_HAS_B | if b == 1 { BOB_B } else { 0 };
                    }
                    body.push(f);
                }
            }
            Message::AliceBlockDisclosure(d) => {
                put_u64(&mut body, d.block);
                put_u64(&mut body, d.rounds.len() as u64);
                for r in &d.rounds {
                    put_u64(&mut body, r.index);
                    let mut f = r.omega.code() | basis_flag(r.alpha, ALICE_ALPHA_X);
                    if let Some(a) = r.a {
                        f |= ALICE_HAS_A | if a == 1 { ALICE_A } else { 0 };
                    }
                    body.push(f);
                }
            }
            Message::SiftAnnounce { n_sift, proceed } => {
                put_u64(&mut body, *n_sift);
                body.push(*proceed as u8);
            }
            Message::Syndrome(s) => put_bits(&mut body, s),
            Message::VerifyHash { r, hash } => {
                put_u64(&mut body, *r);
                put_bits(&mut body, hash);
            }
            Message::VerifyResult { equal } => body.push(*equal as u8),
            Message::PaSeed { r, n_fin } => {
                put_u64(&mut body, *r);
                put_u64(&mut body, *n_fin);
            }
            Message::End { ack } => body.push(*ack as u8),
        }
        let len = u32::try_from(body.len()).expect("frame fits in u32");
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&len.to_le_bytes());
        frame.extend_from_slice(&body);
        frame
    }

    /// Decodes the tag and payload of one frame (without the length prefix).
    pub fn from_body(body: &[u8]) -> Result<Message> {
        let mut c = Cursor { buf: body, pos: 0 };
        let msg = match c.u8()? {
            TAG_BOB => {
                let block = c.u64()?;
                let n = c.count(1)?;
                let mut rounds = Vec::with_capacity(n);
                for _ in 0..n {
                    let f = c.u8()?;
                    if f & !(BOB_CLICK | BOB_BETA_X | BOB_HAS_B | BOB_B) != 0
                        || f & BOB_B != 0 && f & BOB_HAS_B == 0
                    {
                        return Err(Error::Wire(format!("Bob round flags {f:#04x}")));
                    }
                    rounds.push(BobRound {
                        clicked: f & BOB_CLICK != 0,
                        beta: if f & BOB_BETA_X != 0 { Basis::X } else { Basis::Z },
                        b: (f & BOB_HAS_B != 0).then_some((f & BOB_B != 0) as u8),
                    });
                }
                Message::BobBlockDisclosure(BobDisclosure { block, rounds })
            }
            TAG_ALICE => {
                let block = c.u64()?;
                let n = c.count(9)?;
                let mut rounds = Vec::with_capacity(n);
                for _ in 0..n {
                    let index = c.u64()?;
                    let f = c.u8()?;
                    let omega = Intensity::from_code(f & ALICE_OMEGA);
                    if f & !(ALICE_OMEGA | ALICE_ALPHA_X | ALICE_HAS_A | ALICE_A) != 0
                        || f & ALICE_A != 0 && f & ALICE_HAS_A == 0
                        || omega.is_none()
                    {
                        return Err(Error::Wire(format!("Alice round flags {f:#04x}")));
                    }
                    rounds.push(AliceRound {
                        index,
                        omega: omega.expect("checked"),
                        alpha: if f & ALICE_ALPHA_X != 0 { Basis::X } else { Basis::Z },
                        a: (f & ALICE_HAS_A != 0).then_some((f & ALICE_A != 0) as u8),
                    });
                }
                Message::AliceBlockDisclosure(AliceDisclosure { block, rounds })
            }
            TAG_SIFT => Message::SiftAnnounce { n_sift: c.u64()?, proceed: c.flag()? },
            TAG_SYNDROME => Message::Syndrome(c.bits()?),
            TAG_VERIFY_HASH => Message::VerifyHash { r: c.u64()?, hash: c.bits()? },
            TAG_VERIFY_RESULT => Message::VerifyResult { equal: c.flag()? },
            TAG_PA_SEED => Message::PaSeed { r: c.u64()?, n_fin: c.u64()? },
            TAG_END => Message::End { ack: c.flag()? },
            t => return Err(Error::Wire(format!("unknown tag {t}"))),
        };
        c.finish()?;
        Ok(msg)
    }

    /// Decodes exactly one complete frame.
    pub fn from_frame(frame: &[u8]) -> Result<Message> {
        let (msg, used) = decode_prefix(frame)?;
        if used != frame.len() {
            return Err(Error::Wire(format!("{} bytes after the frame", frame.len() - used)));
        }
        Ok(msg)
    }

    /// Reads one frame, returning `None` on a clean end of stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Message>> {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut body)?;
        Message::from_body(&body).map(Some)
    }
}

fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Wire("missing length prefix".into()));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(4..4 + len).ok_or_else(|| Error::Wire("frame truncated".into()))?;
    Ok((Message::from_body(body)?, 4 + len))
}

/// Splits a transcript file back into its messages.
pub fn decode_frames(mut bytes: &[u8]) -> Result<Vec<Message>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (m, used) = decode_prefix(bytes)?;
        out.push(m);
        bytes = &bytes[used..];
    }
    Ok(out)
}

/// Ordered, reliable, authenticated duplex message channel.
pub trait Transport {
    fn send(&mut self, msg: &Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;
}

/// Frames over any byte stream, e.g. a socket.
pub struct FramedStream<S> {
    inner: S,
}

impl<S: Read + Write> FramedStream<S> {
    pub fn new(inner: S) -> Self {
        FramedStream { inner }
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: Read + Write> Transport for FramedStream<S> {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.inner.write_all(&msg.to_frame())?;
        self.inner.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        Message::read_from(&mut self.inner)?.ok_or_else(|| Error::protocol("transport closed"))
    }
}

/// In-memory transport end carrying encoded frames between threads.
pub struct MemoryTransport {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
}

/// Two connected in-memory transport ends.
pub fn memory_pair() -> (MemoryTransport, MemoryTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (MemoryTransport { tx: a_tx, rx: a_rx }, MemoryTransport { tx: b_tx, rx: b_rx })
}

impl Transport for MemoryTransport {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.tx.send(msg.to_frame()).map_err(|_| Error::protocol("transport closed"))
    }

    fn recv(&mut self) -> Result<Message> {
        let frame = self.rx.recv().map_err(|_| Error::protocol("transport closed"))?;
        Message::from_frame(&frame)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TranscriptEvent {
    /// Bob's detectors have reported for every round of the block.
    Measured { block: u64 },
    Message { from: Role, message: Message },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedEvent {
    /// Logical timestamp.
    pub time: u64,
    pub event: TranscriptEvent,
}

/// Ordered log of everything that crossed the classical channel, with
/// measurement markers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockTranscript {
    events: Vec<TimedEvent>,
}

impl BlockTranscript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_measured(&mut self, block: u64) {
        self.push(TranscriptEvent::Measured { block });
    }

    pub fn push_message(&mut self, from: Role, message: Message) {
        self.push(TranscriptEvent::Message { from, message });
    }

    pub fn push(&mut self, event: TranscriptEvent) {
        let time = self.events.len() as u64;
        self.events.push(TimedEvent { time, event });
    }

    pub fn events(&self) -> &[TimedEvent] {
        &self.events
    }

    pub fn messages(&self) -> impl Iterator<Item = (Role, &Message)> {
        self.events.iter().filter_map(|e| match &e.event {
            TranscriptEvent::Message { from, message } => Some((*from, message)),
            TranscriptEvent::Measured { .. } => None,
        })
    }

    /// Blocks whose disclosures are complete, in order.
    pub fn completed_blocks(&self) -> Vec<u64> {
        self.messages()
            .filter_map(|(_, m)| match m {
                Message::AliceBlockDisclosure(d) => Some(d.block),
                _ => None,
            })
            .collect()
    }

    /// The transcript file: every frame in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, m) in self.messages() {
            out.extend_from_slice(&m.to_frame());
        }
        out
    }
}

fn violation(block: u64, message: impl Into<String>) -> Error {
    Error::Ordering { block, message: message.into() }
}

/// Content rules for Bob's disclosure of a block of `m` rounds.
pub fn check_bob_disclosure(d: &BobDisclosure, m: u64) -> Result<()> {
    if d.rounds.len() as u64 != m {
        return Err(violation(d.block, format!("Bob disclosed {} of {m} rounds", d.rounds.len())));
    }
    for (i, r) in d.rounds.iter().enumerate() {
        match (r.clicked, r.beta, r.b) {
            (true, Basis::Z, Some(_)) => {
                return Err(violation(d.block, format!("b disclosed for Z-basis click in round {i}")))
            }
            (false, _, Some(_)) => {
                return Err(violation(d.block, format!("b disclosed for a round without click ({i})")))
            }
            (true, Basis::X, None) => {
                return Err(violation(d.block, format!("b missing for X-basis click in round {i}")))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Content rules for Alice's answer to `bob`.
pub fn check_alice_disclosure(d: &AliceDisclosure, bob: &BobDisclosure) -> Result<()> {
    let detected = bob.rounds.iter().enumerate().filter(|(_, r)| r.clicked).map(|(i, _)| i as u64);
    if !d.rounds.iter().map(|r| r.index).eq(detected) {
        return Err(violation(d.block, "Alice's disclosure does not cover exactly the detected rounds"));
    }
    for r in &d.rounds {
        match (r.alpha, r.a) {
            (Basis::Z, Some(_)) => {
                return Err(violation(d.block, format!("a disclosed for Z-basis round {}", r.index)))
            }
            (Basis::X, None) => {
                return Err(violation(d.block, format!("a missing for X-basis round {}", r.index)))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Validates the logical-time order measurement(j) < Bob(j) < Alice(j),
/// that Alice answers block `j` before any later block is disclosed, that
/// key generation only starts once every block is closed, and the
/// disclosure-content rules.
pub fn enforce_ordering(t: &BlockTranscript) -> Result<()> {
    let mut measured: Option<u64> = None;
    let mut bob: Vec<BobDisclosure> = Vec::new();
    let mut alice_done: u64 = 0;
    for e in t.events() {
        match &e.event {
            TranscriptEvent::Measured { block } => {
                let next = measured.map_or(0, |b| b + 1);
                if *block != next {
                    return Err(violation(*block, format!("measured out of sequence, expected block {next}")));
                }
                if *block > alice_done {
                    return Err(violation(*block, "measured before the previous block was closed"));
                }
                measured = Some(*block);
            }
            TranscriptEvent::Message { from, message } => match message {
                Message::BobBlockDisclosure(d) => {
                    if *from != Role::Bob {
                        return Err(violation(d.block, "Bob's disclosure sent by Alice"));
                    }
                    if measured != Some(d.block) || bob.len() as u64 != d.block {
                        return Err(violation(d.block, "Bob disclosed before the block was measured"));
                    }
                    let m = d.rounds.len() as u64;
                    check_bob_disclosure(d, m)?;
                    bob.push(d.clone());
                }
                Message::AliceBlockDisclosure(d) => {
                    if *from != Role::Alice {
                        return Err(violation(d.block, "Alice's disclosure sent by Bob"));
                    }
                    let Some(bd) = bob.get(d.block as usize) else {
                        return Err(violation(d.block, "Alice disclosed before Bob's disclosure"));
                    };
                    if d.block != alice_done {
                        return Err(violation(d.block, format!("Alice disclosed out of sequence, expected block {alice_done}")));
                    }
                    if bob.len() as u64 > d.block + 1 {
                        return Err(violation(d.block, "Alice disclosed after a later block"));
                    }
                    check_alice_disclosure(d, bd)?;
                    alice_done += 1;
                }
                other => {
                    if alice_done != bob.len() as u64 || measured.map_or(0, |b| b + 1) != alice_done {
                        return Err(violation(alice_done, format!("{} before the block was closed", other.name())));
                    }
                }
            },
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiftResult {
    /// Global round indices `j * M + i` with `alpha = beta = Z` and a click.
    pub indices: Vec<u64>,
    pub observables: Observables,
}

/// Sifting and observable counting from the public disclosures alone.
pub fn sift(c: &ProtocolConstants, bob: &[BobDisclosure], alice: &[AliceDisclosure]) -> Result<SiftResult> {
    if bob.len() != alice.len() {
        return Err(Error::protocol(format!("{} Bob disclosures against {} from Alice", bob.len(), alice.len())));
    }
    let mut indices = Vec::new();
    let mut sifted = PerIntensity::new(0u64, 0, 0);
    let (mut err_d, mut err_v) = (0u64, 0u64);
    for (j, (bd, ad)) in bob.iter().zip(alice).enumerate() {
        if bd.block != j as u64 || ad.block != j as u64 {
            return Err(Error::protocol(format!("disclosures for block {j} are mislabelled")));
        }
        check_bob_disclosure(bd, c.m)?;
        check_alice_disclosure(ad, bd)?;
        for ar in &ad.rounds {
            let br = &bd.rounds[ar.index as usize];
            match (ar.alpha, br.beta) {
                (Basis::Z, Basis::Z) => {
                    indices.push(j as u64 * c.m + ar.index);
                    sifted[ar.omega] += 1;
                }
                (Basis::X, Basis::X) if ar.a != br.b => match ar.omega {
                    Intensity::Decoy => err_d += 1,
                    Intensity::Vacuum => err_v += 1,
                    Intensity::Signal => {}
                },
                _ => {}
            }
        }
    }
    Ok(SiftResult {
        indices,
        observables: Observables::new(sifted.signal, sifted.decoy, sifted.vacuum, err_d, err_v),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    pub role: Role,
    pub sifted_key: BitString,
    /// Empty when reconciliation never ran.
    pub reconciled_key: BitString,
    /// Empty exactly when the run aborted.
    pub final_key: BitString,
}

impl KeyMaterial {
    fn new(role: Role) -> Self {
        KeyMaterial {
            role,
            sifted_key: BitString::default(),
            reconciled_key: BitString::default(),
            final_key: BitString::default(),
        }
    }

    pub fn aborted(&self) -> bool {
        self.final_key.is_empty()
    }
}

/// Writes keys as lowercase hex, one per line.
pub fn write_keys<W: Write>(mut out: W, keys: &[&BitString]) -> std::io::Result<()> {
    for k in keys {
        writeln!(out, "{}", k.to_hex())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Key,
    /// Announced at sifting because `N_fin <= 0`.
    AbortedLength,
    AbortedVerification,
}

/// Everything both parties must agree on before the first pulse.
#[derive(Debug, Clone)]
pub struct SharedSetup {
    pub constants: ProtocolConstants,
    pub expected: ExpectedObservables,
    pub ec: EcOptions,
}

/// Both parties' conclusions from the sifted data.
struct KeyPlan {
    sift: SiftResult,
    security: SecurityResult,
    n_ec: u64,
}

fn plan(setup: &SharedSetup, bob: &[BobDisclosure], alice: &[AliceDisclosure]) -> Result<KeyPlan> {
    let sift = sift(&setup.constants, bob, alice)?;
    let n_ec = n_ec(sift.observables.n_sift, setup.constants.e_bit_assumed, setup.ec.efficiency)?;
    let security = security_result(&setup.constants, &sift.observables, &setup.expected, n_ec)?;
    Ok(KeyPlan { sift, security, n_ec })
}

fn ec_code(setup: &SharedSetup, plan: &KeyPlan) -> Result<EcCode> {
    EcCode::new(plan.sift.observables.n_sift as usize, plan.n_ec as usize, setup.constants.e_bit_assumed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AliceState {
    Prepare(u64),
    AwaitBob(u64),
    AwaitEndAccept,
    AwaitVerifyResult,
    AwaitFinalAck,
    Done,
}

pub struct AliceMachine {
    setup: SharedSetup,
    seed: u64,
    state: AliceState,
    settings: Vec<AliceSettings>,
    bob_disclosures: Vec<BobDisclosure>,
    alice_disclosures: Vec<AliceDisclosure>,
    plan: Option<KeyPlan>,
    pa_seed: u64,
    keys: KeyMaterial,
    outcome: Option<Outcome>,
}

impl AliceMachine {
    pub fn new(setup: SharedSetup, seed: u64) -> Self {
        AliceMachine {
            setup,
            seed,
            state: AliceState::Prepare(0),
            settings: Vec::new(),
            bob_disclosures: Vec::new(),
            alice_disclosures: Vec::new(),
            plan: None,
            pa_seed: 0,
            keys: KeyMaterial::new(Role::Alice),
            outcome: None,
        }
    }

    pub fn wants_to_prepare(&self) -> bool {
        matches!(self.state, AliceState::Prepare(_))
    }

    pub fn is_done(&self) -> bool {
        self.state == AliceState::Done
    }

    /// Chooses settings for the next block and emits its pulses.
    pub fn prepare_block(&mut self) -> Result<Vec<OpticalPulse>> {
        let AliceState::Prepare(j) = self.state else {
            return Err(Error::protocol("Alice is not ready to prepare a block"));
        };
        let mut rng = stream(self.seed, StreamRole::AliceSettings, j);
        let c = &self.setup.constants;
        let mut pulses = Vec::with_capacity(c.m as usize);
        for _ in 0..c.m {
            let s = draw_alice_settings(c, &mut rng);
            pulses.push(OpticalPulse::prepare(&s));
            self.settings.push(s);
        }
        self.state = AliceState::AwaitBob(j);
        Ok(pulses)
    }

    pub fn handle(&mut self, msg: Message) -> Result<Vec<Message>> {
        match (self.state, msg) {
            (AliceState::AwaitBob(j), Message::BobBlockDisclosure(d)) => {
                if d.block != j {
                    return Err(violation(d.block, format!("Bob disclosed block {} while {j} is open", d.block)));
                }
                check_bob_disclosure(&d, self.setup.constants.m)?;
                let base = (j * self.setup.constants.m) as usize;
                let rounds = d
                    .rounds
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.clicked)
                    .map(|(i, _)| AliceRound::disclose(i as u64, &self.settings[base + i]))
                    .collect();
                let answer = AliceDisclosure { block: j, rounds };
                self.bob_disclosures.push(d);
                self.alice_disclosures.push(answer.clone());
                let mut out = vec![Message::AliceBlockDisclosure(answer)];
                if j + 1 < self.setup.constants.n_block {
                    self.state = AliceState::Prepare(j + 1);
                } else {
                    out.push(Message::End { ack: true });
                    self.state = AliceState::AwaitEndAccept;
                }
                Ok(out)
            }
            (AliceState::AwaitEndAccept, Message::End { ack: true }) => self.start_key_generation(),
            (AliceState::AwaitVerifyResult, Message::VerifyResult { equal }) => {
                if !equal {
                    self.finish(Outcome::AbortedVerification);
                    return Ok(Vec::new());
                }
                let plan = self.plan.as_ref().expect("planned before verification");
                let n_fin = plan.security.key_length;
                let seed = ToeplitzSeed::privacy_amplification(self.pa_seed, n_fin as usize, self.keys.reconciled_key.len())?;
                self.keys.final_key = pa_hash(&self.keys.reconciled_key, &seed, n_fin as usize)?;
                self.state = AliceState::AwaitFinalAck;
                Ok(vec![Message::PaSeed { r: self.pa_seed, n_fin }])
            }
            (AliceState::AwaitFinalAck, Message::End { ack: true }) => {
                self.outcome = Some(Outcome::Key);
                self.state = AliceState::Done;
                Ok(Vec::new())
            }
            (state, msg) => Err(unexpected(Role::Alice, &format!("{state:?}"), &msg)),
        }
    }

    fn start_key_generation(&mut self) -> Result<Vec<Message>> {
        let plan = plan(&self.setup, &self.bob_disclosures, &self.alice_disclosures)?;
        let key = BitString::from_bits(plan.sift.indices.iter().map(|&i| self.settings[i as usize].a_bit == 1));
        self.keys.sifted_key = key.clone();
        let n_sift = plan.sift.observables.n_sift;
        let proceed = !plan.security.abort;
        let mut out = vec![Message::SiftAnnounce { n_sift, proceed }];
        if !proceed {
            self.plan = Some(plan);
            self.finish(Outcome::AbortedLength);
            return Ok(out);
        }
        let code = ec_code(&self.setup, &plan)?;
        out.push(Message::Syndrome(ec_syndrome(&key, &code)?));
        let mut rng = stream(self.seed, StreamRole::AliceHash, 0);
        let r_verify: u64 = rng.random();
        self.pa_seed = rng.random();
        let n_verify = self.setup.constants.n_verify as usize;
        let seed = ToeplitzSeed::verify(r_verify, n_verify, key.len())?;
        out.push(Message::VerifyHash { r: r_verify, hash: verify_hash(&key, &seed, n_verify)? });
        self.keys.reconciled_key = key;
        self.plan = Some(plan);
        self.state = AliceState::AwaitVerifyResult;
        Ok(out)
    }

    fn finish(&mut self, outcome: Outcome) {
        self.outcome = Some(outcome);
        self.keys.final_key = BitString::default();
        self.state = AliceState::Done;
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn security(&self) -> Option<&SecurityResult> {
        self.plan.as_ref().map(|p| &p.security)
    }

    pub fn settings(&self) -> &[AliceSettings] {
        &self.settings
    }

    pub fn keys(&self) -> &KeyMaterial {
        &self.keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BobState {
    Measure(u64),
    AwaitAlice(u64),
    AwaitEnd,
    AwaitSift,
    AwaitSyndrome,
    AwaitVerifyHash,
    AwaitPaSeed,
    Done,
}

pub struct BobMachine {
    setup: SharedSetup,
    seed: u64,
    state: BobState,
    bases: Vec<Basis>,
    detections: Vec<Detection>,
    bob_disclosures: Vec<BobDisclosure>,
    alice_disclosures: Vec<AliceDisclosure>,
    plan: Option<KeyPlan>,
    keys: KeyMaterial,
    outcome: Option<Outcome>,
}

impl BobMachine {
    pub fn new(setup: SharedSetup, seed: u64) -> Self {
        BobMachine {
            setup,
            seed,
            state: BobState::Measure(0),
            bases: Vec::new(),
            detections: Vec::new(),
            bob_disclosures: Vec::new(),
            alice_disclosures: Vec::new(),
            plan: None,
            keys: KeyMaterial::new(Role::Bob),
            outcome: None,
        }
    }

    pub fn wants_to_measure(&self) -> bool {
        matches!(self.state, BobState::Measure(_))
    }

    pub fn is_done(&self) -> bool {
        self.state == BobState::Done
    }

    /// Chooses bases for the next block, lets `detect` report one detection
    /// per basis, and returns the disclosure that proves the block was measured.
    pub fn measure(&mut self, detect: impl FnOnce(&[Basis]) -> Vec<Detection>) -> Result<Message> {
        let BobState::Measure(j) = self.state else {
            return Err(Error::protocol("Bob is not ready to measure"));
        };
        let mut rng = stream(self.seed, StreamRole::BobSettings, j);
        let c = &self.setup.constants;
        let bases: Vec<Basis> = (0..c.m).map(|_| draw_bob_basis(c, &mut rng)).collect();
        let detections = detect(&bases);
        if detections.len() != bases.len() {
            return Err(Error::SizeMismatch { expected: bases.len(), actual: detections.len() });
        }
        let rounds = bases.iter().zip(&detections).map(|(&b, &d)| BobRound::disclose(b, d)).collect();
        let d = BobDisclosure { block: j, rounds };
        self.bases.extend(bases);
        self.detections.extend(detections);
        self.bob_disclosures.push(d.clone());
        self.state = BobState::AwaitAlice(j);
        Ok(Message::BobBlockDisclosure(d))
    }

    pub fn handle(&mut self, msg: Message) -> Result<Vec<Message>> {
        match (self.state, msg) {
            (BobState::AwaitAlice(j), Message::AliceBlockDisclosure(d)) => {
                if d.block != j {
                    return Err(violation(d.block, format!("Alice disclosed block {} while {j} is open", d.block)));
                }
                check_alice_disclosure(&d, &self.bob_disclosures[j as usize])?;
                self.alice_disclosures.push(d);
                self.state = if j + 1 < self.setup.constants.n_block {
                    BobState::Measure(j + 1)
                } else {
                    BobState::AwaitEnd
                };
                Ok(Vec::new())
            }
            (BobState::AwaitEnd, Message::End { ack: true }) => {
                self.state = BobState::AwaitSift;
                Ok(vec![Message::End { ack: true }])
            }
            (BobState::AwaitSift, Message::SiftAnnounce { n_sift, proceed }) => {
                let plan = plan(&self.setup, &self.bob_disclosures, &self.alice_disclosures)?;
                if plan.sift.observables.n_sift != n_sift {
                    return Err(Error::protocol(format!(
                        "announced N_sift {n_sift} differs from {}",
                        plan.sift.observables.n_sift
                    )));
                }
                if plan.security.abort == proceed {
                    return Err(Error::protocol("announced abort decision differs from the local one"));
                }
                self.keys.sifted_key = BitString::from_bits(
                    plan.sift.indices.iter().map(|&i| self.detections[i as usize].bit() == Some(1)),
                );
                self.plan = Some(plan);
                if proceed {
                    self.state = BobState::AwaitSyndrome;
                } else {
                    self.finish(Outcome::AbortedLength);
                }
                Ok(Vec::new())
            }
            (BobState::AwaitSyndrome, Message::Syndrome(s)) => {
                let plan = self.plan.as_ref().expect("planned at sifting");
                let code = ec_code(&self.setup, plan)?;
                let e = ec_decode(&self.keys.sifted_key, &s, &code)?;
                self.keys.reconciled_key = self.keys.sifted_key.xor(&e)?;
                self.state = BobState::AwaitVerifyHash;
                Ok(Vec::new())
            }
            (BobState::AwaitVerifyHash, Message::VerifyHash { r, hash }) => {
                let n_verify = self.setup.constants.n_verify as usize;
                let seed = ToeplitzSeed::verify(r, n_verify, self.keys.reconciled_key.len())?;
                let equal = verify_hash(&self.keys.reconciled_key, &seed, n_verify)? == hash;
                if equal {
                    self.state = BobState::AwaitPaSeed;
                } else {
                    self.finish(Outcome::AbortedVerification);
                }
                Ok(vec![Message::VerifyResult { equal }])
            }
            (BobState::AwaitPaSeed, Message::PaSeed { r, n_fin }) => {
                let plan = self.plan.as_ref().expect("planned at sifting");
                if plan.security.key_length != n_fin {
                    return Err(Error::protocol(format!(
                        "announced N_fin {n_fin} differs from {}",
                        plan.security.key_length
                    )));
                }
                let seed = ToeplitzSeed::privacy_amplification(r, n_fin as usize, self.keys.reconciled_key.len())?;
                self.keys.final_key = pa_hash(&self.keys.reconciled_key, &seed, n_fin as usize)?;
                self.outcome = Some(Outcome::Key);
                self.state = BobState::Done;
                Ok(vec![Message::End { ack: true }])
            }
            (state, msg) => Err(unexpected(Role::Bob, &format!("{state:?}"), &msg)),
        }
    }

    fn finish(&mut self, outcome: Outcome) {
        self.outcome = Some(outcome);
        self.keys.final_key = BitString::default();
        self.state = BobState::Done;
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn security(&self) -> Option<&SecurityResult> {
        self.plan.as_ref().map(|p| &p.security)
    }

    pub fn measurements(&self) -> impl Iterator<Item = (Basis, Detection)> + '_ {
        self.bases.iter().copied().zip(self.detections.iter().copied())
    }

    pub fn keys(&self) -> &KeyMaterial {
        &self.keys
    }
}

fn unexpected(role: Role, state: &str, msg: &Message) -> Error {
    let block = match msg {
        Message::BobBlockDisclosure(d) => Some(d.block),
        Message::AliceBlockDisclosure(d) => Some(d.block),
        _ => None,
    };
    let text = format!("{role:?} received {} in state {state}", msg.name());
    match block {
        Some(b) => violation(b, text),
        None => Error::protocol(text),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: u64,
    pub ec: EcOptions,
    /// Flip the first syndrome bit in transit.
    pub tamper: bool,
    /// Public expected counts; derived from the channel model when absent.
    pub expected: Option<ExpectedObservables>,
    /// Keep the per-round ground truth, including hidden photon numbers.
    pub record_rounds: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub alice: KeyMaterial,
    pub bob: KeyMaterial,
    pub transcript: BlockTranscript,
    pub security: SecurityResult,
    pub outcome: Outcome,
    pub expected: ExpectedObservables,
    pub rounds: Option<Vec<RoundOutcome>>,
}

fn tamper_with(msg: Message) -> Message {
    match msg {
        Message::Syndrome(mut s) if !s.is_empty() => {
            s.flip(0);
            Message::Syndrome(s)
        }
        other => other,
    }
}

fn shared_setup(c: &ProtocolConstants, ch: &ChannelModel, opts: &RunOptions) -> Result<SharedSetup> {
    c.validate()?;
    ch.validate()?;
    let expected = opts.expected.unwrap_or_else(|| expected_observables(c, ch));
    Ok(SharedSetup { constants: c.clone(), expected, ec: opts.ec })
}

/// Detections for one block, keeping the photon numbers away from Bob.
fn transmit_block(
    physics: &Physics,
    seed: u64,
    block: u64,
    pulses: &[OpticalPulse],
    bases: &[Basis],
    hidden: &mut Vec<u32>,
) -> Vec<Detection> {
    let mut rng = stream(seed, StreamRole::Physics, block);
    pulses
        .iter()
        .zip(bases)
        .map(|(p, &b)| {
            let (d, n) = physics.transmit(p, b, &mut rng);
            hidden.push(n);
            d
        })
        .collect()
}

fn finish_run(
    alice: AliceMachine,
    bob: BobMachine,
    transcript: BlockTranscript,
    setup: SharedSetup,
    hidden: Vec<u32>,
    record: bool,
) -> Result<RunOutput> {
    if !alice.is_done() || !bob.is_done() {
        return Err(Error::protocol("run stalled before both parties finished"));
    }
    let outcome = alice.outcome().expect("done implies an outcome");
    if bob.outcome() != Some(outcome) {
        return Err(Error::protocol("parties disagree on the outcome"));
    }
    let security = alice.security().cloned().expect("security computed at sifting");
    let rounds = record.then(|| {
        alice
            .settings()
            .iter()
            .zip(bob.measurements())
            .zip(&hidden)
            .map(|((s, (beta, detection)), &n)| RoundOutcome {
                n_emitted: n,
                omega: s.omega,
                alpha: s.alpha,
                a_bit: s.a_bit,
                beta,
                detection,
            })
            .collect()
    });
    Ok(RunOutput {
        alice: alice.keys().clone(),
        bob: bob.keys().clone(),
        transcript,
        security,
        outcome,
        expected: setup.expected,
        rounds,
    })
}

/// Runs both parties in-process. Every message is framed and decoded on the
/// way, and the transcript records what was delivered.
pub fn run_protocol(c: &ProtocolConstants, ch: &ChannelModel, opts: &RunOptions) -> Result<RunOutput> {
    let setup = shared_setup(c, ch, opts)?;
    let physics = Physics::new(c, ch);
    let mut alice = AliceMachine::new(setup.clone(), opts.seed);
    let mut bob = BobMachine::new(setup.clone(), opts.seed);
    let mut transcript = BlockTranscript::new();
    let mut hidden = Vec::with_capacity(if opts.record_rounds { c.n() as usize } else { 0 });
    let mut queue: VecDeque<(Role, Message)> = VecDeque::new();
    let mut block = 0u64;

    loop {
        if let Some((from, msg)) = queue.pop_front() {
            let msg = if opts.tamper && from == Role::Alice { tamper_with(msg) } else { msg };
            let delivered = Message::from_frame(&msg.to_frame())?;
            transcript.push_message(from, delivered.clone());
            let (to, replies) = match from {
                Role::Alice => (Role::Bob, bob.handle(delivered)?),
                Role::Bob => (Role::Alice, alice.handle(delivered)?),
            };
            queue.extend(replies.into_iter().map(|m| (to, m)));
        } else if alice.wants_to_prepare() && bob.wants_to_measure() {
            let pulses = alice.prepare_block()?;
            let mut sink = Vec::new();
            let disclosure = bob.measure(|bases| transmit_block(&physics, opts.seed, block, &pulses, bases, &mut sink))?;
            if opts.record_rounds {
                hidden.extend(sink);
            }
            transcript.push_measured(block);
            block += 1;
            queue.push_back((Role::Bob, disclosure));
        } else {
            break;
        }
    }
    finish_run(alice, bob, transcript, setup, hidden, opts.record_rounds)
}

/// Transport wrapper that logs every sent message into a shared transcript.
struct Recorder<T> {
    inner: T,
    role: Role,
    log: Arc<Mutex<BlockTranscript>>,
    tamper: bool,
}

impl<T: Transport> Transport for Recorder<T> {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let msg = if self.tamper { tamper_with(msg.clone()) } else { msg.clone() };
        self.log.lock().expect("transcript lock").push_message(self.role, msg.clone());
        self.inner.send(&msg)
    }

    fn recv(&mut self) -> Result<Message> {
        self.inner.recv()
    }
}

/// Runs Alice and Bob on separate threads, connected by the given transport
/// ends. Pulses travel over an in-memory quantum link on Bob's side.
pub fn run_protocol_over<A, B>(
    c: &ProtocolConstants,
    ch: &ChannelModel,
    opts: &RunOptions,
    alice_end: A,
    bob_end: B,
) -> Result<RunOutput>
where
    A: Transport + Send,
    B: Transport + Send,
{
    let setup = shared_setup(c, ch, opts)?;
    let physics = Physics::new(c, ch);
    let log = Arc::new(Mutex::new(BlockTranscript::new()));
    let (fiber_tx, fiber_rx) = mpsc::channel::<Vec<OpticalPulse>>();
    let seed = opts.seed;

    let (alice, (bob, hidden)) = std::thread::scope(|scope| {
        let alice_log = Arc::clone(&log);
        let alice_setup = setup.clone();
        let alice_thread = scope.spawn(move || -> Result<AliceMachine> {
            let mut t = Recorder { inner: alice_end, role: Role::Alice, log: alice_log, tamper: opts.tamper };
            let mut alice = AliceMachine::new(alice_setup, seed);
            while !alice.is_done() {
                if alice.wants_to_prepare() {
                    fiber_tx.send(alice.prepare_block()?).map_err(|_| Error::protocol("quantum link closed"))?;
                } else {
                    for m in alice.handle(t.recv()?)? {
                        t.send(&m)?;
                    }
                }
            }
            Ok(alice)
        });
        let bob_log = Arc::clone(&log);
        let bob_setup = setup.clone();
        let physics = &physics;
        let bob_thread = scope.spawn(move || -> Result<(BobMachine, Vec<u32>)> {
            let mut t = Recorder { inner: bob_end, role: Role::Bob, log: Arc::clone(&bob_log), tamper: false };
            let mut bob = BobMachine::new(bob_setup, seed);
            let mut hidden = Vec::new();
            let mut block = 0u64;
            while !bob.is_done() {
                if bob.wants_to_measure() {
                    let pulses = fiber_rx.recv().map_err(|_| Error::protocol("quantum link closed"))?;
                    let msg = bob.measure(|bases| transmit_block(physics, seed, block, &pulses, bases, &mut hidden))?;
                    bob_log.lock().expect("transcript lock").push_measured(block);
                    block += 1;
                    t.send(&msg)?;
                } else {
                    for m in bob.handle(t.recv()?)? {
                        t.send(&m)?;
                    }
                }
            }
            Ok((bob, hidden))
        });
        let alice = alice_thread.join().map_err(|_| Error::protocol("Alice thread panicked"))?;
        let bob = bob_thread.join().map_err(|_| Error::protocol("Bob thread panicked"))?;
        Ok::<_, Error>((alice?, bob?))
    })?;
    let transcript = Arc::try_unwrap(log).expect("threads joined").into_inner().expect("transcript lock");
    let hidden = if opts.record_rounds { hidden } else { Vec::new() };
    finish_run(alice, bob, transcript, setup, hidden, opts.record_rounds)
}
