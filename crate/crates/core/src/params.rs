//! Pre-agreed protocol constants, photon-number statistics of the
//! phase-randomised coherent source, and the clamped entropy function.
//!
//! `mu` always denotes the mean photon number of the whole double pulse;
//! each of the two pulses carries `mu / 2`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Index, IndexMut};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_SUM_TOL: f64 = 1e-12;
const PHASE_TOL: f64 = 1e-12;

/// Above this photon number the Poisson weight is evaluated in log space.
const DIRECT_POISSON_MAX_N: u32 = 20;

/// Intensity label of a double pulse: signal, decoy or vacuum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intensity {
    #[serde(rename = "S")]
    Signal,
    #[serde(rename = "D")]
    Decoy,
    #[serde(rename = "V")]
    Vacuum,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Signal, Intensity::Decoy, Intensity::Vacuum];

    pub fn code(self) -> u8 {
        match self {
            Intensity::Signal => 0,
            Intensity::Decoy => 1,
            Intensity::Vacuum => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn symbol(self) -> char {
        match self {
            Intensity::Signal => 'S',
            Intensity::Decoy => 'D',
            Intensity::Vacuum => 'V',
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::Z, Basis::X];

    pub fn code(self) -> u8 {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Basis::Z => write!(f, "Z"),
            Basis::X => write!(f, "X"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerIntensity<T> {
    #[serde(rename = "S")]
    pub signal: T,
    #[serde(rename = "D")]
    pub decoy: T,
    #[serde(rename = "V")]
    pub vacuum: T,
}

impl<T> PerIntensity<T> {
    pub fn new(signal: T, decoy: T, vacuum: T) -> Self {
        Self { signal, decoy, vacuum }
    }

    pub fn from_fn(mut f: impl FnMut(Intensity) -> T) -> Self {
        Self {
            signal: f(Intensity::Signal),
            decoy: f(Intensity::Decoy),
            vacuum: f(Intensity::Vacuum),
        }
    }
}

impl<T> Index<Intensity> for PerIntensity<T> {
    type Output = T;

    fn index(&self, w: Intensity) -> &T {
        match w {
            Intensity::Signal => &self.signal,
            Intensity::Decoy => &self.decoy,
            Intensity::Vacuum => &self.vacuum,
        }
    }
}

impl<T> IndexMut<Intensity> for PerIntensity<T> {
    fn index_mut(&mut self, w: Intensity) -> &mut T {
        match w {
            Intensity::Signal => &mut self.signal,
            Intensity::Decoy => &mut self.decoy,
            Intensity::Vacuum => &mut self.vacuum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerBasis<T> {
    #[serde(rename = "Z")]
    pub z: T,
    #[serde(rename = "X")]
    pub x: T,
}

impl<T> PerBasis<T> {
    pub fn new(z: T, x: T) -> Self {
        Self { z, x }
    }
}

impl<T> Index<Basis> for PerBasis<T> {
    type Output = T;

    fn index(&self, b: Basis) -> &T {
        match b {
            Basis::Z => &self.z,
            Basis::X => &self.x,
        }
    }
}

/// Relative phase between the two pulses for every (bit, basis) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseTable {
    #[serde(rename = "0Z")]
    pub zero_z: f64,
    #[serde(rename = "1Z")]
    pub one_z: f64,
    #[serde(rename = "0X")]
    pub zero_x: f64,
    #[serde(rename = "1X")]
    pub one_x: f64,
}

impl PhaseTable {
    pub const STANDARD: PhaseTable = PhaseTable {
        zero_z: 0.0,
        one_z: PI,
        zero_x: PI / 2.0,
        one_x: 3.0 * PI / 2.0,
    };

    pub fn phase(&self, bit: u8, basis: Basis) -> f64 {
        match (bit & 1, basis) {
            (0, Basis::Z) => self.zero_z,
            (_, Basis::Z) => self.one_z,
            (0, Basis::X) => self.zero_x,
            (_, Basis::X) => self.one_x,
        }
    }
}

impl Default for PhaseTable {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Every constant fixed before the protocol starts.
///
/// Load from a file with [`ProtocolConstants::from_json_file`] or build one
/// with [`ProtocolConstants::new`]; both paths run [`ProtocolConstants::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawConstants")]
pub struct ProtocolConstants {
    pub n_block: u64,
    pub m: u64,
    pub n_total: u64,
    pub p_intensity: PerIntensity<f64>,
    pub mu: PerIntensity<f64>,
    pub p_basis_alice: PerBasis<f64>,
    pub p_basis_bob: PerBasis<f64>,
    pub p_bit: f64,
    pub theta: PhaseTable,
    pub n_verify: u32,
    pub e_bit_assumed: f64,
    pub eps_secrecy: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstants {
    n_block: u64,
    m: u64,
    n_total: u64,
    p_intensity: PerIntensity<f64>,
    mu: PerIntensity<f64>,
    p_basis_alice: PerBasis<f64>,
    p_basis_bob: PerBasis<f64>,
    p_bit: f64,
    theta: PhaseTable,
    n_verify: u32,
    e_bit_assumed: f64,
    eps_secrecy: f64,
}

impl TryFrom<RawConstants> for ProtocolConstants {
    type Error = Error;

    fn try_from(r: RawConstants) -> Result<Self> {
        let c = ProtocolConstants {
            n_block: r.n_block,
            m: r.m,
            n_total: r.n_total,
            p_intensity: r.p_intensity,
            mu: r.mu,
            p_basis_alice: r.p_basis_alice,
            p_basis_bob: r.p_basis_bob,
            p_bit: r.p_bit,
            theta: r.theta,
            n_verify: r.n_verify,
            e_bit_assumed: r.e_bit_assumed,
            eps_secrecy: r.eps_secrecy,
        };
        c.validate()?;
        Ok(c)
    }
}

impl ProtocolConstants {
    /// Builds a validated constant set; `n_total`, `p_bit` and `theta` are
    /// filled in from their fixed definitions.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_block: u64,
        m: u64,
        p_intensity: PerIntensity<f64>,
        mu: PerIntensity<f64>,
        p_basis_alice: PerBasis<f64>,
        p_basis_bob: PerBasis<f64>,
        n_verify: u32,
        e_bit_assumed: f64,
        eps_secrecy: f64,
    ) -> Result<Self> {
        let c = ProtocolConstants {
            n_block,
            m,
            n_total: n_block
                .checked_mul(m)
                .ok_or_else(|| Error::invalid("n_block * m overflows"))?,
            p_intensity,
            mu,
            p_basis_alice,
            p_basis_bob,
            p_bit: 0.5,
            theta: PhaseTable::STANDARD,
            n_verify,
            e_bit_assumed,
            eps_secrecy,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_block == 0 || self.m == 0 {
            return Err(Error::invalid("n_block and m must be positive"));
        }
        if self.n_block.checked_mul(self.m) != Some(self.n_total) {
            return Err(Error::invalid(format!(
                "n_total = {} but m * n_block = {} * {}",
                self.n_total, self.m, self.n_block
            )));
        }
        check_distribution(
            "p_intensity",
            &[self.p_intensity.signal, self.p_intensity.decoy, self.p_intensity.vacuum],
        )?;
        check_distribution("p_basis_alice", &[self.p_basis_alice.z, self.p_basis_alice.x])?;
        check_distribution("p_basis_bob", &[self.p_basis_bob.z, self.p_basis_bob.x])?;
        if self.p_bit != 0.5 {
            return Err(Error::invalid("p_bit is fixed to 1/2"));
        }
        let mu = &self.mu;
        if !(mu.vacuum >= 0.0 && mu.decoy > mu.vacuum && mu.signal > mu.decoy && mu.signal.is_finite()) {
            return Err(Error::invalid(format!(
                "intensities must satisfy mu_S > mu_D > mu_V >= 0, got ({}, {}, {})",
                mu.signal, mu.decoy, mu.vacuum
            )));
        }
        let t = &self.theta;
        let expected = PhaseTable::STANDARD;
        for (name, got, want) in [
            ("0Z", t.zero_z, expected.zero_z),
            ("1Z", t.one_z, expected.one_z),
            ("0X", t.zero_x, expected.zero_x),
            ("1X", t.one_x, expected.one_x),
        ] {
            if (got - want).abs() > PHASE_TOL {
                return Err(Error::invalid(format!("theta[{name}] must be {want}, got {got}")));
            }
        }
        if self.n_verify == 0 {
            return Err(Error::invalid("n_verify must be positive"));
        }
        if !(0.0..=1.0).contains(&self.e_bit_assumed) {
            return Err(Error::invalid("e_bit_assumed must lie in [0, 1]"));
        }
        if !(self.eps_secrecy > 0.0 && self.eps_secrecy < 1.0) {
            return Err(Error::invalid("eps_secrecy must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("constants always serialise")
    }

    /// N, the total number of double pulses.
    pub fn n(&self) -> u64 {
        self.n_total
    }

    pub fn distributions(&self) -> PhotonDistributions {
        PhotonDistributions::new(self)
    }
}

fn check_distribution(name: &str, probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid(format!("{name} entries must lie in [0, 1]")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::invalid(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Photon-number truncation used for cached tables: `ceil(mu + 12 sqrt(mu) + 30)`.
pub fn truncation_n_max(mu: f64) -> u32 {
    (mu + 12.0 * mu.sqrt() + 30.0).ceil() as u32
}

/// Probability that a double pulse of total mean `mu` holds exactly `n` photons.
pub fn poisson_pcs(mu: f64, n: u32) -> Result<f64> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::domain(format!("mean photon number must be >= 0, got {mu}")));
    }
    if mu == 0.0 {
        return Ok(if n == 0 { 1.0 } else { 0.0 });
    }
    if n <= DIRECT_POISSON_MAX_N {
        let mut term = (-mu).exp();
        for k in 1..=n {
            term *= mu / k as f64;
        }
        Ok(term)
    } else {
        let n_f = n as f64;
        let log_p = n_f * mu.ln() - mu - libm::lgamma(n_f + 1.0);
        Ok(log_p.exp())
    }
}

/// Joint probability that intensity `w` is chosen and the pulse holds `n` photons.
pub fn p_int_joint(c: &ProtocolConstants, w: Intensity, n: u32) -> Result<f64> {
    Ok(c.p_intensity[w] * poisson_pcs(c.mu[w], n)?)
}

/// Probability of intensity `w` conditioned on an `n`-photon emission.
pub fn p_int_cond(c: &ProtocolConstants, w: Intensity, n: u32) -> Result<f64> {
    let mut joints = [0.0; 3];
    for (slot, v) in joints.iter_mut().zip(Intensity::ALL) {
        *slot = p_int_joint(c, v, n)?;
    }
    let total: f64 = joints.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate(format!(
            "no intensity can emit {n} photons with nonzero probability"
        )));
    }
    Ok(joints[w as usize] / total)
}

/// Binary entropy on `[0, 1/2]`, clamped to 1 above one half.
///
/// This is the nondecreasing variant used for the privacy-amplification
/// amount, so `h(x) != h(1 - x)` once `x > 1/2`.
pub fn entropy_h(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::domain(format!("entropy argument must be >= 0, got {x}")));
    }
    Ok(if x == 0.0 {
        0.0
    } else if x <= 0.5 {
        -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
    } else {
        1.0
    })
}

/// Cached photon-number tables derived from a constant set.
#[derive(Debug, Clone)]
pub struct PhotonDistributions {
    n_max: PerIntensity<u32>,
    p_intensity: PerIntensity<f64>,
    /// `pcs[w][n]` for `n <= table_len - 1`, shared length across intensities.
    pcs: PerIntensity<Vec<f64>>,
}

impl PhotonDistributions {
    pub fn new(c: &ProtocolConstants) -> Self {
        let n_max = PerIntensity::from_fn(|w| truncation_n_max(c.mu[w]));
        let len = Intensity::ALL.iter().map(|&w| n_max[w]).max().unwrap_or(0) as usize + 1;
        let pcs = PerIntensity::from_fn(|w| {
            (0..len as u32)
                .map(|n| poisson_pcs(c.mu[w], n).expect("validated intensities are nonnegative"))
                .collect()
        });
        Self { n_max, p_intensity: c.p_intensity, pcs }
    }

    /// Truncation for intensity `w`.
    pub fn n_max(&self, w: Intensity) -> u32 {
        self.n_max[w]
    }

    /// Largest photon number held in the cached tables.
    pub fn table_max(&self) -> u32 {
        self.pcs.signal.len() as u32 - 1
    }

    pub fn pcs(&self, w: Intensity, n: u32) -> f64 {
        self.pcs[w].get(n as usize).copied().unwrap_or(0.0)
    }

    pub fn joint(&self, w: Intensity, n: u32) -> f64 {
        self.p_intensity[w] * self.pcs(w, n)
    }

    /// `p_n^int`, the probability of an `n`-photon emission averaged over intensities.
    pub fn total(&self, n: u32) -> f64 {
        Intensity::ALL.iter().map(|&w| self.joint(w, n)).sum()
    }

    pub fn cond(&self, w: Intensity, n: u32) -> Result<f64> {
        let total = self.total(n);
        if !(total > 0.0) {
            return Err(Error::Degenerate(format!(
                "no intensity can emit {n} photons with nonzero probability"
            )));
        }
        Ok(self.joint(w, n) / total)
    }

    /// Probability mass beyond the truncation for intensity `w`.
    pub fn tail_mass(&self, w: Intensity) -> f64 {
        let kept: f64 = (0..=self.n_max[w]).map(|n| self.pcs(w, n)).sum();
        (1.0 - kept).max(0.0)
    }
}
