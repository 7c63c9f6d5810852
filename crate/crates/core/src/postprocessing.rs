//! GF(2) post-processing: packed bit strings and matrices, a syndrome-based
//! LDPC reconciliation code, and the modified Toeplitz hash `[T | I]` used
//! for both error verification and privacy amplification.
//!
//! Bit order is LSB-first everywhere: bit `i` lives in word `i / 64` at
//! position `i % 64`, and in byte `i / 8` at position `i % 8` once packed.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::entropy_h;

/// Domain separator for verification-hash seeds.
pub const VERIFY_DOMAIN: &[u8] = b"qkd-verify-toeplitz";
/// Domain separator for privacy-amplification seeds.
pub const PA_DOMAIN: &[u8] = b"qkd-pa-toeplitz";
/// Public seed from which every reconciliation code is generated.
pub const EC_CODE_SEED: u64 = 0x5eed_c0de_0000_0001;
/// Iteration cap of the belief-propagation decoder.
pub const BP_MAX_ITERATIONS: usize = 60;

const LLR_CLAMP: f64 = 50.0;

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitString {
    len: usize,
    words: Vec<u64>,
}

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl BitString {
    pub fn zeros(len: usize) -> Self {
        BitString { len, words: vec![0; words_for(len)] }
    }

    pub fn from_bits<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut s = BitString::default();
        for b in bits {
            s.push(b);
        }
        s
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut words: Vec<u64> = (0..words_for(len)).map(|_| rng.random()).collect();
        mask_tail(&mut words, len);
        BitString { len, words }
    }

    /// Unpacks `len` bits from LSB-first bytes. Pad bits past `len` must be zero.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::SizeMismatch { expected: len.div_ceil(8), actual: bytes.len() });
        }
        let mut words = vec![0u64; words_for(len)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        let mut masked = words.clone();
        mask_tail(&mut masked, len);
        if masked != words {
            return Err(Error::invalid("nonzero pad bits after the last bit"));
        }
        Ok(BitString { len, words })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        (0..self.len.div_ceil(8)).map(|i| (self.words[i / 8] >> (8 * (i % 8))) as u8).collect()
    }

    /// Lowercase hex of [`BitString::to_bytes`].
    pub fn to_hex(&self) -> String {
        self.to_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        let m = 1u64 << (i % 64);
        if v {
            self.words[i / 64] |= m;
        } else {
            self.words[i / 64] &= !m;
        }
    }

    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        self.words[i / 64] ^= 1u64 << (i % 64);
    }

    pub fn push(&mut self, v: bool) {
        if self.len.is_multiple_of(64) {
            self.words.push(0);
        }
        self.len += 1;
        if v {
            self.words[(self.len - 1) / 64] |= 1u64 << ((self.len - 1) % 64);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn parity(&self) -> bool {
        self.words.iter().fold(0u64, |acc, w| acc ^ w).count_ones() & 1 == 1
    }

    pub fn xor_assign(&mut self, other: &BitString) -> Result<()> {
        if self.len != other.len {
            return Err(Error::SizeMismatch { expected: self.len, actual: other.len });
        }
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
        Ok(())
    }

    pub fn xor(&self, other: &BitString) -> Result<BitString> {
        let mut out = self.clone();
        out.xor_assign(other)?;
        Ok(out)
    }

    /// Parity of the bitwise AND, i.e. the GF(2) inner product.
    pub fn dot(&self, other: &BitString) -> Result<bool> {
        if self.len != other.len {
            return Err(Error::SizeMismatch { expected: self.len, actual: other.len });
        }
        let acc = self.words.iter().zip(&other.words).fold(0u64, |acc, (a, b)| acc ^ (a & b));
        Ok(acc.count_ones() & 1 == 1)
    }

    /// Bits `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> BitString {
        assert!(start <= end && end <= self.len);
        BitString::from_bits((start..end).map(|i| self.get(i)))
    }

    pub fn reversed(&self) -> BitString {
        BitString::from_bits((0..self.len).rev().map(|i| self.get(i)))
    }

    /// 64 bits starting at `pos`, reading zeros past the end.
    fn window64(&self, pos: usize) -> u64 {
        let q = pos / 64;
        let r = pos % 64;
        let lo = self.words.get(q).map_or(0, |w| w >> r);
        let hi = if r == 0 { 0 } else { self.words.get(q + 1).map_or(0, |w| w << (64 - r)) };
        lo | hi
    }
}

fn mask_tail(words: &mut [u64], len: usize) {
    if !len.is_multiple_of(64) {
        if let Some(last) = words.last_mut() {
            *last &= (1u64 << (len % 64)) - 1;
        }
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitString({} bits, ", self.len)?;
        for b in self.iter().take(128) {
            write!(f, "{}", b as u8)?;
        }
        if self.len > 128 {
            write!(f, "...")?;
        }
        write!(f, ")")
    }
}

/// Dense GF(2) matrix, rows packed into 64-bit words.
#[derive(Clone, PartialEq, Eq)]
pub struct Gf2Matrix {
    rows: usize,
    cols: usize,
    stride: usize,
    data: Vec<u64>,
}

impl fmt::Debug for Gf2Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Gf2Matrix {}x{}", self.rows, self.cols)?;
        for r in 0..self.rows.min(32) {
            for c in 0..self.cols.min(96) {
                write!(f, "{}", self.get(r, c) as u8)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl Gf2Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let stride = words_for(cols);
        Gf2Matrix { rows, cols, stride, data: vec![0; rows * stride] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            let row = BitString::random(cols, rng);
            m.row_words_mut(r).copy_from_slice(row.words());
        }
        m
    }

    pub fn from_rows(rows: &[BitString]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut m = Self::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::SizeMismatch { expected: cols, actual: r.len() });
            }
            m.row_words_mut(i).copy_from_slice(r.words());
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn row_words(&self, r: usize) -> &[u64] {
        &self.data[r * self.stride..(r + 1) * self.stride]
    }

    fn row_words_mut(&mut self, r: usize) -> &mut [u64] {
        &mut self.data[r * self.stride..(r + 1) * self.stride]
    }

    pub fn row(&self, r: usize) -> BitString {
        BitString { len: self.cols, words: self.row_words(r).to_vec() }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        assert!(r < self.rows && c < self.cols);
        self.data[r * self.stride + c / 64] >> (c % 64) & 1 == 1
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        assert!(r < self.rows && c < self.cols);
        let w = &mut self.data[r * self.stride + c / 64];
        if v {
            *w |= 1u64 << (c % 64);
        } else {
            *w &= !(1u64 << (c % 64));
        }
    }

    fn xor_row_into(&mut self, src: usize, dst: usize) {
        for k in 0..self.stride {
            let v = self.data[src * self.stride + k];
            self.data[dst * self.stride + k] ^= v;
        }
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a != b {
            for k in 0..self.stride {
                self.data.swap(a * self.stride + k, b * self.stride + k);
            }
        }
    }

    /// `A x` for a column vector `x` of length `cols`.
    pub fn mul_vec(&self, x: &BitString) -> Result<BitString> {
        if x.len() != self.cols {
            return Err(Error::SizeMismatch { expected: self.cols, actual: x.len() });
        }
        let mut out = BitString::zeros(self.rows);
        for r in 0..self.rows {
            let acc = self.row_words(r).iter().zip(x.words()).fold(0u64, |acc, (a, b)| acc ^ (a & b));
            if acc.count_ones() & 1 == 1 {
                out.set(r, true);
            }
        }
        Ok(out)
    }

    /// `x A` for a row vector `x` of length `rows`.
    pub fn vec_mul(&self, x: &BitString) -> Result<BitString> {
        if x.len() != self.rows {
            return Err(Error::SizeMismatch { expected: self.rows, actual: x.len() });
        }
        let mut out = BitString::zeros(self.cols);
        for r in 0..self.rows {
            if x.get(r) {
                for (o, w) in out.words.iter_mut().zip(self.row_words(r)) {
                    *o ^= w;
                }
            }
        }
        Ok(out)
    }

    pub fn mul(&self, other: &Gf2Matrix) -> Result<Gf2Matrix> {
        if self.cols != other.rows {
            return Err(Error::SizeMismatch { expected: self.cols, actual: other.rows });
        }
        let mut out = Gf2Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let row = other.vec_mul(&self.row(r))?;
            out.row_words_mut(r).copy_from_slice(row.words());
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Gf2Matrix {
        let mut t = Gf2Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.get(r, c) {
                    t.set(c, r, true);
                }
            }
        }
        t
    }

    /// Gaussian elimination in place, returning the rank and pivot columns.
    fn eliminate(&mut self) -> usize {
        let mut rank = 0;
        for c in 0..self.cols {
            if rank == self.rows {
                break;
            }
            let Some(p) = (rank..self.rows).find(|&r| self.get(r, c)) else {
                continue;
            };
            self.swap_rows(p, rank);
            for r in 0..self.rows {
                if r != rank && self.get(r, c) {
                    self.xor_row_into(rank, r);
                }
            }
            rank += 1;
        }
        rank
    }

    pub fn rank(&self) -> usize {
        self.clone().eliminate()
    }

    pub fn invert(&self) -> Result<Gf2Matrix> {
        if self.rows != self.cols {
            return Err(Error::SizeMismatch { expected: self.rows, actual: self.cols });
        }
        let n = self.rows;
        let mut aug = Gf2Matrix::zeros(n, 2 * n);
        for r in 0..n {
            for c in 0..n {
                if self.get(r, c) {
                    aug.set(r, c, true);
                }
            }
            aug.set(r, n + r, true);
        }
        for c in 0..n {
            let p = (c..n).find(|&r| aug.get(r, c)).ok_or(Error::Singular)?;
            aug.swap_rows(p, c);
            for r in 0..n {
                if r != c && aug.get(r, c) {
                    aug.xor_row_into(c, r);
                }
            }
        }
        let mut inv = Gf2Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                if aug.get(r, n + c) {
                    inv.set(r, c, true);
                }
            }
        }
        Ok(inv)
    }
}

pub fn gf2_mul(a: &Gf2Matrix, b: &Gf2Matrix) -> Result<Gf2Matrix> {
    a.mul(b)
}

pub fn gf2_rank(a: &Gf2Matrix) -> usize {
    a.rank()
}

pub fn gf2_invert(a: &Gf2Matrix) -> Result<Gf2Matrix> {
    a.invert()
}

/// Expands `(domain, r)` into `nbits` pseudorandom bits.
///
/// Block `k` is `SHA-256(domain || r as u64 LE || k as u64 LE)`; blocks are
/// concatenated and bit `i` is bit `i % 8` of byte `i / 8`.
pub fn expand_seed(domain: &[u8], r: u64, nbits: usize) -> BitString {
    let nbytes = nbits.div_ceil(8);
    let mut bytes = Vec::with_capacity(nbytes + 32);
    let mut counter = 0u64;
    while bytes.len() < nbytes {
        let mut h = Sha256::new();
        h.update(domain);
        h.update(r.to_le_bytes());
        h.update(counter.to_le_bytes());
        bytes.extend_from_slice(&h.finalize());
        counter += 1;
    }
    bytes.truncate(nbytes);
    if !nbits.is_multiple_of(8) {
        if let Some(last) = bytes.last_mut() {
            *last &= (1u8 << (nbits % 8)) - 1;
        }
    }
    BitString::from_bytes(&bytes, nbits).expect("tail bits were masked")
}

/// Seed of a modified Toeplitz map `[T | I]` with `rows` outputs and `cols`
/// inputs. `diagonal` holds the `cols - 1` bits defining the
/// `rows x (cols - rows)` block `T`, with `T[i][j] = diagonal[cols - rows - 1 + i - j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToeplitzSeed {
    pub r: u64,
    pub rows: usize,
    pub cols: usize,
    pub diagonal: BitString,
}

impl ToeplitzSeed {
    pub fn derive(domain: &[u8], r: u64, rows: usize, cols: usize) -> Result<Self> {
        if rows > cols {
            return Err(Error::invalid(format!("hash output {rows} longer than input {cols}")));
        }
        Ok(ToeplitzSeed { r, rows, cols, diagonal: expand_seed(domain, r, cols.saturating_sub(1)) })
    }

    /// Seed with explicit diagonal bits, for exhaustive enumeration.
    pub fn from_diagonal(rows: usize, cols: usize, diagonal: BitString) -> Result<Self> {
        if rows > cols || diagonal.len() != cols.saturating_sub(1) {
            return Err(Error::SizeMismatch { expected: cols.saturating_sub(1), actual: diagonal.len() });
        }
        Ok(ToeplitzSeed { r: 0, rows, cols, diagonal })
    }

    pub fn verify(r: u64, n_verify: usize, key_len: usize) -> Result<Self> {
        Self::derive(VERIFY_DOMAIN, r, n_verify, key_len)
    }

    pub fn privacy_amplification(r: u64, n_fin: usize, key_len: usize) -> Result<Self> {
        Self::derive(PA_DOMAIN, r, n_fin, key_len)
    }

    /// The dense matrix `[T | I]`.
    pub fn to_matrix(&self) -> Gf2Matrix {
        let c = self.cols - self.rows;
        let mut m = Gf2Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..c {
                if self.diagonal.get(c - 1 + i - j) {
                    m.set(i, j, true);
                }
            }
            m.set(i, c + i, true);
        }
        m
    }

    /// `[T | I] k`, word-sliced.
    pub fn apply(&self, k: &BitString) -> Result<BitString> {
        if k.len() != self.cols {
            return Err(Error::SizeMismatch { expected: self.cols, actual: k.len() });
        }
        let c = self.cols - self.rows;
        // with x' the first c key bits reversed, T x = (d[i .. i + c] . x')_i
        let xr = k.slice(0, c).reversed();
        let mut out = k.slice(c, self.cols);
        for i in 0..self.rows {
            let mut acc = 0u64;
            for (q, &w) in xr.words().iter().enumerate() {
                acc ^= self.diagonal.window64(i + 64 * q) & w;
            }
            if acc.count_ones() & 1 == 1 {
                out.flip(i);
            }
        }
        Ok(out)
    }
}

/// Error-verification hash: `n_verify` output bits, universal2 and surjective.
pub fn verify_hash(k: &BitString, seed: &ToeplitzSeed, n_verify: usize) -> Result<BitString> {
    if seed.rows != n_verify || n_verify > k.len() {
        return Err(Error::SizeMismatch { expected: seed.rows, actual: n_verify });
    }
    seed.apply(k)
}

/// Privacy-amplification hash: `n_fin` output bits, dual universal2 and surjective.
pub fn pa_hash(k: &BitString, seed: &ToeplitzSeed, n_fin: usize) -> Result<BitString> {
    if n_fin == 0 || n_fin > k.len() {
        return Err(Error::invalid(format!("n_fin {n_fin} outside 1..={}", k.len())));
    }
    if seed.rows != n_fin {
        return Err(Error::SizeMismatch { expected: seed.rows, actual: n_fin });
    }
    seed.apply(k)
}

/// Syndrome length `ceil(efficiency * n_sift * h(e_bit))`.
pub fn n_ec(n_sift: u64, e_bit: f64, efficiency: f64) -> Result<u64> {
    Ok((efficiency * n_sift as f64 * entropy_h(e_bit)?).ceil() as u64)
}

/// Reconciliation settings shared by both parties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcOptions {
    /// Multiplier on the Shannon limit `n h(e_bit)`.
    pub efficiency: f64,
}

impl Default for EcOptions {
    fn default() -> Self {
        EcOptions { efficiency: 1.16 }
    }
}

/// Sparse parity-check code with `m` checks on `n` bits.
///
/// The first `n - m` columns have weight three (fewer if `m < 3`); the last
/// `m` columns form a dual-diagonal staircase, which makes the checks
/// linearly independent and lets any syndrome be met by back-substitution.
#[derive(Debug, Clone)]
pub struct EcCode {
    n: usize,
    m: usize,
    var_checks: Vec<Vec<u32>>,
    check_vars: Vec<Vec<u32>>,
    p_error: f64,
}

impl EcCode {
    /// Code for `n` key bits with `m` syndrome bits, decoding at bit-error rate `p_error`.
    pub fn new(n: usize, m: usize, p_error: f64) -> Result<Self> {
        if m > n {
            return Err(Error::invalid(format!("syndrome length {m} exceeds key length {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(EC_CODE_SEED);
        rng.set_stream(((n as u64) << 32) ^ m as u64);
        let mut var_checks = Vec::with_capacity(n);
        let info = n - m;
        let weight = m.min(3);
        for _ in 0..info {
            let mut rows: Vec<u32> = sample(&mut rng, m, weight).into_iter().map(|r| r as u32).collect();
            rows.sort_unstable();
            var_checks.push(rows);
        }
        for j in 0..m {
            let mut rows = vec![j as u32];
            if j + 1 < m {
                rows.push(j as u32 + 1);
            }
            var_checks.push(rows);
        }
        let mut check_vars = vec![Vec::new(); m];
        for (v, checks) in var_checks.iter().enumerate() {
            for &c in checks {
                check_vars[c as usize].push(v as u32);
            }
        }
        Ok(EcCode { n, m, var_checks, check_vars, p_error: p_error.clamp(1e-9, 0.5 - 1e-9) })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// The dense `n x m` matrix `C` with syndrome `s = k C`.
    pub fn syndrome_matrix(&self) -> Gf2Matrix {
        let mut c = Gf2Matrix::zeros(self.n, self.m);
        for (v, checks) in self.var_checks.iter().enumerate() {
            for &ch in checks {
                c.set(v, ch as usize, true);
            }
        }
        c
    }

    fn syndrome_of(&self, k: &BitString) -> BitString {
        let mut s = BitString::zeros(self.m);
        for v in 0..self.n {
            if k.get(v) {
                for &c in &self.var_checks[v] {
                    s.flip(c as usize);
                }
            }
        }
        s
    }

    /// Adjusts the staircase bits of `e` so that its syndrome equals `target`.
    fn force_syndrome(&self, e: &mut BitString, target: &BitString) {
        let mut residual = self.syndrome_of(e);
        residual.xor_assign(target).expect("syndromes share the code length");
        let base = self.n - self.m;
        let mut carry = false;
        for j in 0..self.m {
            let p = residual.get(j) ^ carry;
            if p {
                e.flip(base + j);
            }
            carry = p;
        }
    }

    /// Sum-product decoding of the error pattern with syndrome `target`.
    fn belief_propagation(&self, target: &BitString) -> BitString {
        let prior = ((1.0 - self.p_error) / self.p_error).ln();
        let mut offsets = Vec::with_capacity(self.m + 1);
        offsets.push(0usize);
        for c in &self.check_vars {
            offsets.push(offsets.last().unwrap() + c.len());
        }
        let edges = *offsets.last().unwrap();
        let mut edge_var = Vec::with_capacity(edges);
        for c in &self.check_vars {
            edge_var.extend(c.iter().map(|&v| v as usize));
        }
        let mut var_edges = vec![Vec::new(); self.n];
        for (e, &v) in edge_var.iter().enumerate() {
            var_edges[v].push(e);
        }
        let mut v2c = vec![prior; edges];
        let mut c2v = vec![0.0f64; edges];
        let mut tanhs = Vec::new();
        let mut prefix = Vec::new();
        let mut guess = BitString::zeros(self.n);

        if self.syndrome_of(&guess) == *target {
            return guess;
        }
        for _ in 0..BP_MAX_ITERATIONS {
            for c in 0..self.m {
                let (lo, hi) = (offsets[c], offsets[c + 1]);
                let sign = if target.get(c) { -1.0 } else { 1.0 };
                tanhs.clear();
                tanhs.extend(v2c[lo..hi].iter().map(|l| (l / 2.0).tanh()));
                prefix.clear();
                let mut acc = 1.0;
                for &t in &tanhs {
                    prefix.push(acc);
                    acc *= t;
                }
                let mut suffix = 1.0;
                for k in (0..tanhs.len()).rev() {
                    let prod = (prefix[k] * suffix).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
                    c2v[lo + k] = (sign * 2.0 * prod.atanh()).clamp(-LLR_CLAMP, LLR_CLAMP);
                    suffix *= tanhs[k];
                }
            }
            for v in 0..self.n {
                let total: f64 = prior + var_edges[v].iter().map(|&e| c2v[e]).sum::<f64>();
                guess.set(v, total < 0.0);
                for &e in &var_edges[v] {
                    v2c[e] = (total - c2v[e]).clamp(-LLR_CLAMP, LLR_CLAMP);
                }
            }
            if self.syndrome_of(&guess) == *target {
                break;
            }
        }
        guess
    }
}

/// Syndrome `k C` of a sifted key.
pub fn ec_syndrome(k: &BitString, code: &EcCode) -> Result<BitString> {
    if k.len() != code.n {
        return Err(Error::SizeMismatch { expected: code.n, actual: k.len() });
    }
    Ok(code.syndrome_of(k))
}

/// Error vector `e` with `(k_b xor e) C = s_a`. Always returns a vector of
/// the key length whose syndrome matches, even when it is not the true error.
pub fn ec_decode(k_b: &BitString, s_a: &BitString, code: &EcCode) -> Result<BitString> {
    if s_a.len() != code.m {
        return Err(Error::SizeMismatch { expected: code.m, actual: s_a.len() });
    }
    let mut target = ec_syndrome(k_b, code)?;
    target.xor_assign(s_a)?;
    let mut e = code.belief_propagation(&target);
    code.force_syndrome(&mut e, &target);
    Ok(e)
}
