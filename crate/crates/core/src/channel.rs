//! Honest lossy, noisy channel with a double-pulse interferometric receiver
//! and two identical threshold detectors.
//!
//! Conventions: the receiver applies phase `0` for the Z basis and `pi/2` for
//! the X basis, so a photon carrying relative phase `theta` reaches detector
//! D0 with probability `cos^2((theta - phi_beta) / 2)` and D1 otherwise.
//! Misalignment flips that routing with probability `e_mis`. The first beam
//! splitter of the receiver discards half of the light into non-interfering
//! time slots, hence the end-to-end per-photon efficiency
//! `eta = eta_ch * eta_det / 2`. Each detector also fires on its own with
//! probability `p_dark`; a double click is resolved to a uniform bit.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Basis, Intensity, PhotonDistributions, ProtocolConstants};

/// Largest photon number accepted by [`fock_click_oracle`].
pub const FOCK_MAX_PHOTONS: u32 = 12;

/// Channel and detector description. Transmittance is given either directly
/// as `eta_ch` or as `loss_db_per_km` together with `distance_km`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawChannel")]
pub struct ChannelModel {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_ch: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_db_per_km: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance_km: Option<f64>,
    pub e_mis: f64,
    pub p_dark: f64,
    pub eta_det: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    #[serde(default)]
    eta_ch: Option<f64>,
    #[serde(default)]
    loss_db_per_km: Option<f64>,
    #[serde(default)]
    distance_km: Option<f64>,
    e_mis: f64,
    p_dark: f64,
    eta_det: f64,
}

impl TryFrom<RawChannel> for ChannelModel {
    type Error = Error;

    fn try_from(r: RawChannel) -> Result<Self> {
        let ch = ChannelModel {
            eta_ch: r.eta_ch,
            loss_db_per_km: r.loss_db_per_km,
            distance_km: r.distance_km,
            e_mis: r.e_mis,
            p_dark: r.p_dark,
            eta_det: r.eta_det,
        };
        ch.validate()?;
        Ok(ch)
    }
}

impl ChannelModel {
    pub fn with_transmittance(eta_ch: f64, eta_det: f64, e_mis: f64, p_dark: f64) -> Result<Self> {
        let ch = ChannelModel {
            eta_ch: Some(eta_ch),
            loss_db_per_km: None,
            distance_km: None,
            e_mis,
            p_dark,
            eta_det,
        };
        ch.validate()?;
        Ok(ch)
    }

    pub fn with_fiber(
        loss_db_per_km: f64,
        distance_km: f64,
        eta_det: f64,
        e_mis: f64,
        p_dark: f64,
    ) -> Result<Self> {
        let ch = ChannelModel {
            eta_ch: None,
            loss_db_per_km: Some(loss_db_per_km),
            distance_km: Some(distance_km),
            e_mis,
            p_dark,
            eta_det,
        };
        ch.validate()?;
        Ok(ch)
    }

    /// Channel with a total attenuation of `loss_db` decibels.
    pub fn with_loss_db(loss_db: f64, eta_det: f64, e_mis: f64, p_dark: f64) -> Result<Self> {
        Self::with_transmittance(10f64.powf(-loss_db / 10.0), eta_det, e_mis, p_dark)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.eta_ch, self.loss_db_per_km, self.distance_km) {
            (Some(eta), None, None) => {
                if !(0.0..=1.0).contains(&eta) {
                    return Err(Error::invalid("eta_ch must lie in [0, 1]"));
                }
            }
            (None, Some(alpha), Some(len)) => {
                if !(alpha >= 0.0 && alpha.is_finite() && len >= 0.0 && len.is_finite()) {
                    return Err(Error::invalid("loss_db_per_km and distance_km must be >= 0"));
                }
            }
            _ => {
                return Err(Error::invalid(
                    "give either eta_ch or both loss_db_per_km and distance_km",
                ))
            }
        }
        if !(0.0..=0.5).contains(&self.e_mis) {
            return Err(Error::invalid("e_mis must lie in [0, 1/2]"));
        }
        if !(self.p_dark >= 0.0 && self.p_dark < 1.0) {
            return Err(Error::invalid("p_dark must lie in [0, 1)"));
        }
        if !(self.eta_det > 0.0 && self.eta_det <= 1.0) {
            return Err(Error::invalid("eta_det must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Channel transmittance `eta_ch`.
    pub fn transmittance(&self) -> f64 {
        match self.eta_ch {
            Some(eta) => eta,
            None => {
                let db = self.loss_db_per_km.unwrap_or(0.0) * self.distance_km.unwrap_or(0.0);
                10f64.powf(-db / 10.0)
            }
        }
    }

    /// Probability that one emitted photon reaches a detector and is registered.
    pub fn eta(&self) -> f64 {
        self.transmittance() * self.eta_det / 2.0
    }

    /// Same model at a different fibre length, keeping every other field.
    pub fn at_distance(&self, distance_km: f64) -> Result<Self> {
        let mut ch = self.clone();
        ch.distance_km = Some(distance_km);
        if ch.loss_db_per_km.is_none() {
            return Err(Error::invalid("channel has no per-km loss to scale"));
        }
        ch.validate()?;
        Ok(ch)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Receiver phase for measurement basis `beta`.
pub fn receiver_phase(beta: Basis) -> f64 {
    match beta {
        Basis::Z => 0.0,
        Basis::X => FRAC_PI_2,
    }
}

/// Fraction of the interfering light that reaches D0, before misalignment.
pub fn routing_fraction(theta: f64, beta: Basis) -> f64 {
    let half = (theta - receiver_phase(beta)) / 2.0;
    let c = half.cos();
    c * c
}

/// Routing fraction after the misalignment flip.
pub fn misaligned_fraction(f: f64, e_mis: f64) -> f64 {
    (1.0 - e_mis) * f + e_mis * (1.0 - f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClickProbabilities {
    pub only0: f64,
    pub only1: f64,
    pub both: f64,
    pub none: f64,
}

impl ClickProbabilities {
    pub fn total(&self) -> f64 {
        self.only0 + self.only1 + self.both + self.none
    }

    pub fn click(&self) -> f64 {
        1.0 - self.none
    }

    /// Probability that the decoded bit differs from `bit`, with double
    /// clicks counted as errors half of the time.
    pub fn error_against(&self, bit: u8) -> f64 {
        let wrong = if bit & 1 == 0 { self.only1 } else { self.only0 };
        wrong + 0.5 * self.both
    }

    pub fn max_abs_diff(&self, other: &ClickProbabilities) -> f64 {
        [
            self.only0 - other.only0,
            self.only1 - other.only1,
            self.both - other.both,
            self.none - other.none,
        ]
        .iter()
        .fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// Outcome probabilities for independent Poisson light of means `mu0`, `mu1`
/// on the two detectors.
pub fn clicks_from_means(mu0: f64, mu1: f64, p_dark: f64) -> ClickProbabilities {
    let silent0 = (1.0 - p_dark) * (-mu0).exp();
    let silent1 = (1.0 - p_dark) * (-mu1).exp();
    ClickProbabilities {
        only0: (1.0 - silent0) * silent1,
        only1: silent0 * (1.0 - silent1),
        both: (1.0 - silent0) * (1.0 - silent1),
        none: silent0 * silent1,
    }
}

/// Detector means for a coherent double pulse of total mean `mu` and relative phase `theta`.
pub fn detector_means(mu: f64, ch: &ChannelModel, theta: f64, beta: Basis) -> (f64, f64) {
    let f = misaligned_fraction(routing_fraction(theta, beta), ch.e_mis);
    let m = mu * ch.eta();
    (m * f, m * (1.0 - f))
}

pub fn click_probabilities(
    c: &ProtocolConstants,
    ch: &ChannelModel,
    omega: Intensity,
    alpha: Basis,
    a_bit: u8,
    beta: Basis,
) -> ClickProbabilities {
    let theta = c.theta.phase(a_bit, alpha);
    let (mu0, mu1) = detector_means(c.mu[omega], ch, theta, beta);
    clicks_from_means(mu0, mu1, ch.p_dark)
}

/// Outcome probabilities for exactly one emitted photon.
pub fn single_photon_clicks(ch: &ChannelModel, theta: f64, beta: Basis) -> ClickProbabilities {
    let f = misaligned_fraction(routing_fraction(theta, beta), ch.e_mis);
    let eta = ch.eta();
    let d = ch.p_dark;
    let (to0, to1, lost) = (eta * f, eta * (1.0 - f), 1.0 - eta);
    ClickProbabilities {
        only0: to0 * (1.0 - d) + lost * d * (1.0 - d),
        only1: to1 * (1.0 - d) + lost * d * (1.0 - d),
        both: (to0 + to1) * d + lost * d * d,
        none: lost * (1.0 - d) * (1.0 - d),
    }
}

/// Brute-force outcome probabilities for an `n`-photon double pulse.
///
/// Each photon is routed stage by stage (channel, first beam splitter,
/// interference of the two time-bin amplitudes, misalignment, detector
/// efficiency) and all multinomial splits of the `n` photons over
/// (D0, D1, lost) are enumerated before dark counts are applied.
pub fn fock_click_oracle(
    n_photons: u32,
    ch: &ChannelModel,
    theta: f64,
    beta: Basis,
) -> Result<ClickProbabilities> {
    if n_photons > FOCK_MAX_PHOTONS {
        return Err(Error::Truncation { n: n_photons, max: FOCK_MAX_PHOTONS });
    }
    let phase = Complex64::from_polar(1.0, theta - receiver_phase(beta));
    // Amplitudes of the interfering slot at each output port, each arm carrying 1/2.
    let amp0 = (Complex64::new(1.0, 0.0) + phase) * 0.5;
    let amp1 = (Complex64::new(1.0, 0.0) - phase) * 0.5;
    let interfering = amp0.norm_sqr() + amp1.norm_sqr();
    let f = amp0.norm_sqr() / interfering;
    let f = misaligned_fraction(f, ch.e_mis);
    // The early and late side slots carry the other half of the light.
    let survive = ch.transmittance() * interfering * 0.5;
    let p0 = survive * f * ch.eta_det;
    let p1 = survive * (1.0 - f) * ch.eta_det;
    let pl = 1.0 - p0 - p1;

    let n = n_photons as usize;
    let mut fact = vec![1.0f64; n + 1];
    for k in 1..=n {
        fact[k] = fact[k - 1] * k as f64;
    }
    let d = ch.p_dark;
    let mut out = ClickProbabilities { only0: 0.0, only1: 0.0, both: 0.0, none: 0.0 };
    for k0 in 0..=n {
        for k1 in 0..=(n - k0) {
            let kl = n - k0 - k1;
            let w = fact[n] / (fact[k0] * fact[k1] * fact[kl])
                * p0.powi(k0 as i32)
                * p1.powi(k1 as i32)
                * pl.powi(kl as i32);
            let fire0 = if k0 > 0 { 1.0 } else { d };
            let fire1 = if k1 > 0 { 1.0 } else { d };
            out.only0 += w * fire0 * (1.0 - fire1);
            out.only1 += w * (1.0 - fire0) * fire1;
            out.both += w * fire0 * fire1;
            out.none += w * (1.0 - fire0) * (1.0 - fire1);
        }
    }
    Ok(out)
}

/// Poisson mixture of [`fock_click_oracle`] up to [`FOCK_MAX_PHOTONS`].
pub fn fock_mixture(mu: f64, ch: &ChannelModel, theta: f64, beta: Basis) -> Result<ClickProbabilities> {
    let mut out = ClickProbabilities { only0: 0.0, only1: 0.0, both: 0.0, none: 0.0 };
    for n in 0..=FOCK_MAX_PHOTONS {
        let w = crate::params::poisson_pcs(mu, n)?;
        let p = fock_click_oracle(n, ch, theta, beta)?;
        out.only0 += w * p.only0;
        out.only1 += w * p.only1;
        out.both += w * p.both;
        out.none += w * p.none;
    }
    Ok(out)
}

/// What Bob's detectors report for one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Detection {
    NoClick,
    Click(u8),
}

impl Detection {
    pub fn clicked(self) -> bool {
        matches!(self, Detection::Click(_))
    }

    pub fn bit(self) -> Option<u8> {
        match self {
            Detection::Click(b) => Some(b),
            Detection::NoClick => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AliceSettings {
    pub omega: Intensity,
    pub alpha: Basis,
    pub a_bit: u8,
}

pub fn draw_alice_settings<R: Rng + ?Sized>(c: &ProtocolConstants, rng: &mut R) -> AliceSettings {
    let u: f64 = rng.random();
    let omega = if u < c.p_intensity.signal {
        Intensity::Signal
    } else if u < c.p_intensity.signal + c.p_intensity.decoy {
        Intensity::Decoy
    } else {
        Intensity::Vacuum
    };
    let alpha = if rng.random::<f64>() < c.p_basis_alice.z { Basis::Z } else { Basis::X };
    let a_bit = rng.random::<bool>() as u8;
    AliceSettings { omega, alpha, a_bit }
}

pub fn draw_bob_basis<R: Rng + ?Sized>(c: &ProtocolConstants, rng: &mut R) -> Basis {
    if rng.random::<f64>() < c.p_basis_bob.z {
        Basis::Z
    } else {
        Basis::X
    }
}

/// A prepared double pulse. Its photon number is only fixed when the pulse
/// is transmitted, and neither party can read it back.
#[derive(Debug, Clone, Copy)]
pub struct OpticalPulse {
    omega: Intensity,
    /// Index into the phase table: `a_bit + 2 * basis`.
    slot: usize,
}

impl OpticalPulse {
    pub fn prepare(s: &AliceSettings) -> Self {
        OpticalPulse { omega: s.omega, slot: (s.a_bit & 1) as usize + 2 * s.alpha.code() as usize }
    }
}

/// Per-round ground truth, including the photon number that the protocol never sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundOutcome {
    pub n_emitted: u32,
    pub omega: Intensity,
    pub alpha: Basis,
    pub a_bit: u8,
    pub beta: Basis,
    pub detection: Detection,
}

impl RoundOutcome {
    pub fn y(&self) -> bool {
        self.detection.clicked()
    }

    pub fn b(&self) -> Option<u8> {
        self.detection.bit()
    }
}

/// Samples photon numbers and detector responses for pulses travelling through `ch`.
#[derive(Debug, Clone)]
pub struct Physics {
    channel: ChannelModel,
    dists: PhotonDistributions,
    mu: [f64; 3],
    eta: f64,
    /// Per-photon probability of reaching D0, indexed by `[theta index][beta]`.
    route0: [[f64; 2]; 4],
}

impl Physics {
    pub fn new(c: &ProtocolConstants, ch: &ChannelModel) -> Self {
        let thetas = [c.theta.zero_z, c.theta.one_z, c.theta.zero_x, c.theta.one_x];
        let mut route0 = [[0.0; 2]; 4];
        for (i, &theta) in thetas.iter().enumerate() {
            for beta in Basis::ALL {
                route0[i][beta.code() as usize] =
                    misaligned_fraction(routing_fraction(theta, beta), ch.e_mis);
            }
        }
        Physics {
            channel: ch.clone(),
            dists: c.distributions(),
            mu: [c.mu.signal, c.mu.decoy, c.mu.vacuum],
            eta: ch.eta(),
            route0,
        }
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    fn photon_number<R: Rng + ?Sized>(&self, omega: Intensity, rng: &mut R) -> u32 {
        let mu = self.mu[omega.code() as usize];
        if mu == 0.0 {
            return 0;
        }
        let mut u: f64 = rng.random();
        let mut n = 0u32;
        loop {
            let p = if n <= self.dists.table_max() {
                self.dists.pcs(omega, n)
            } else {
                crate::params::poisson_pcs(mu, n).unwrap_or(0.0)
            };
            if u < p || p == 0.0 && n > self.dists.table_max() {
                return n;
            }
            u -= p;
            n += 1;
        }
    }

    /// Sends `pulse` through the channel into a receiver measuring in `beta`.
    /// Returns the detection together with the hidden photon number.
    pub fn transmit<R: Rng + ?Sized>(
        &self,
        pulse: &OpticalPulse,
        beta: Basis,
        rng: &mut R,
    ) -> (Detection, u32) {
        let f = self.route0[pulse.slot][beta.code() as usize];
        let n = self.photon_number(pulse.omega, rng);
        let (p0, p1) = (self.eta * f, self.eta * (1.0 - f));
        let (mut k0, mut k1) = (0u32, 0u32);
        for _ in 0..n {
            let u: f64 = rng.random();
            if u < p0 {
                k0 += 1;
            } else if u < p0 + p1 {
                k1 += 1;
            }
        }
        let d = self.channel.p_dark;
        let fire0 = k0 > 0 || rng.random::<f64>() < d;
        let fire1 = k1 > 0 || rng.random::<f64>() < d;
        let detection = match (fire0, fire1) {
            (false, false) => Detection::NoClick,
            (true, false) => Detection::Click(0),
            (false, true) => Detection::Click(1),
            (true, true) => Detection::Click(rng.random::<bool>() as u8),
        };
        (detection, n)
    }
}

/// One complete round drawn from the three independent streams.
pub fn sample_round<A, B, P>(
    c: &ProtocolConstants,
    physics: &Physics,
    alice_rng: &mut A,
    bob_rng: &mut B,
    physics_rng: &mut P,
) -> RoundOutcome
where
    A: Rng + ?Sized,
    B: Rng + ?Sized,
    P: Rng + ?Sized,
{
    let s = draw_alice_settings(c, alice_rng);
    let beta = draw_bob_basis(c, bob_rng);
    let pulse = OpticalPulse::prepare(&s);
    let (detection, n_emitted) = physics.transmit(&pulse, beta, physics_rng);
    RoundOutcome { n_emitted, omega: s.omega, alpha: s.alpha, a_bit: s.a_bit, beta, detection }
}

pub const TRACE_HEADER: &str = "round\tomega\talpha\ta\tbeta\ty\tb\tn_emitted";

/// Writes the columnar debug trace: one tab-separated line per round.
pub fn write_trace<W: Write>(
    mut out: W,
    rounds: impl IntoIterator<Item = (u64, RoundOutcome)>,
) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for (i, r) in rounds {
        let (y, b) = match r.detection {
            Detection::NoClick => ("noclick", "-".to_string()),
            Detection::Click(b) => ("click", b.to_string()),
        };
        writeln!(out, "{i}\t{}\t{}\t{}\t{}\t{y}\t{b}\t{}", r.omega, r.alpha, r.a_bit, r.beta, r.n_emitted)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::fixtures::reference_constants;
    use crate::rng::{stream, StreamRole};
    use std::f64::consts::PI;

    fn lossless(p_dark: f64, e_mis: f64) -> ChannelModel {
        // eta_det = 1 and eta_ch = 1 still lose half the light at the first splitter
        ChannelModel::with_transmittance(1.0, 1.0, e_mis, p_dark).unwrap()
    }

    #[test]
    fn vacuum_without_darks_never_clicks() {
        let p = clicks_from_means(0.0, 0.0, 0.0);
        assert_eq!((p.only0, p.only1, p.both, p.none), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn vacuum_with_darks() {
        let d = 1e-3;
        let p = clicks_from_means(0.0, 0.0, d);
        assert!((p.none - (1.0 - d) * (1.0 - d)).abs() < 1e-15);
        assert!((p.both - d * d).abs() < 1e-18);
    }

    #[test]
    fn aligned_zero_bit_never_lights_d1() {
        let c = reference_constants();
        let ch = lossless(0.0, 0.0);
        for w in [Intensity::Signal, Intensity::Decoy] {
            let p = click_probabilities(&c, &ch, w, Basis::Z, 0, Basis::Z);
            assert_eq!(p.only1, 0.0);
            assert!(p.only0 > 0.0);
            let p = click_probabilities(&c, &ch, w, Basis::X, 1, Basis::X);
            assert!(p.only0 < 1e-30);
        }
    }

    #[test]
    fn mismatched_bases_split_evenly() {
        let c = reference_constants();
        let ch = lossless(1e-4, 0.03);
        for a in 0..2 {
            let p = click_probabilities(&c, &ch, Intensity::Signal, Basis::Z, a, Basis::X);
            assert!((p.only0 - p.only1).abs() < 1e-15);
        }
    }

    #[test]
    fn outcome_probabilities_sum_to_one_and_dark_floor() {
        let c = reference_constants();
        let ch = ChannelModel::with_loss_db(7.0, 0.3, 0.02, 1e-3).unwrap();
        for w in Intensity::ALL {
            for alpha in Basis::ALL {
                for a in 0..2 {
                    for beta in Basis::ALL {
                        let p = click_probabilities(&c, &ch, w, alpha, a, beta);
                        assert!((p.total() - 1.0).abs() < 1e-12);
                        let total_mean = c.mu[w] * ch.eta();
                        let floor = (1.0 - ch.p_dark).powi(2) * (-total_mean).exp();
                        assert!((p.none - floor).abs() < 1e-15);
                    }
                }
                let z = click_probabilities(&c, &ch, w, alpha, 0, Basis::Z).click();
                let x = click_probabilities(&c, &ch, w, alpha, 0, Basis::X).click();
                assert!((z - x).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fock_single_photon_lossless_is_deterministic() {
        // all transmission losses off: the side-slot half is the only loss left
        let ch = lossless(0.0, 0.0);
        let p = fock_click_oracle(1, &ch, 0.0, Basis::Z).unwrap();
        assert!((p.only0 - 0.5).abs() < 1e-15 && p.only1 < 1e-30 && p.both == 0.0);
        let zero = fock_click_oracle(0, &ch, PI, Basis::X).unwrap();
        assert_eq!(zero, clicks_from_means(0.0, 0.0, 0.0));
        assert!(matches!(
            fock_click_oracle(13, &ch, 0.0, Basis::Z),
            Err(Error::Truncation { n: 13, max: 12 })
        ));
    }

    #[test]
    fn fock_single_photon_matches_closed_form() {
        let ch = ChannelModel::with_loss_db(3.0, 0.4, 0.05, 0.01).unwrap();
        for theta in [0.0, PI / 2.0, PI, 1.5 * PI] {
            for beta in Basis::ALL {
                let a = fock_click_oracle(1, &ch, theta, beta).unwrap();
                let b = single_photon_clicks(&ch, theta, beta);
                assert!(a.max_abs_diff(&b) < 1e-14);
            }
        }
    }

    #[test]
    fn fock_mixture_matches_closed_form() {
        let c = reference_constants();
        let ch = ChannelModel::with_transmittance(0.3 * 2.0, 1.0, 0.02, 1e-4).unwrap();
        let mut c2 = c.clone();
        c2.mu.signal = 0.2;
        for alpha in Basis::ALL {
            for a in 0..2 {
                for beta in Basis::ALL {
                    let closed = click_probabilities(&c2, &ch, Intensity::Signal, alpha, a, beta);
                    let oracle = fock_mixture(0.2, &ch, c2.theta.phase(a, alpha), beta).unwrap();
                    assert!(closed.max_abs_diff(&oracle) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn channel_json_requires_exactly_one_transmittance_form() {
        let direct = r#"{"eta_ch":0.1,"e_mis":0.01,"p_dark":1e-6,"eta_det":0.2}"#;
        let fiber = r#"{"loss_db_per_km":0.2,"distance_km":50,"e_mis":0.01,"p_dark":1e-6,"eta_det":0.2}"#;
        let both = r#"{"eta_ch":0.1,"loss_db_per_km":0.2,"distance_km":50,"e_mis":0.01,"p_dark":1e-6,"eta_det":0.2}"#;
        assert!(ChannelModel::from_json_str(direct).is_ok());
        let f = ChannelModel::from_json_str(fiber).unwrap();
        assert!((f.transmittance() - 0.1).abs() < 1e-15);
        assert!(ChannelModel::from_json_str(both).is_err());
        assert!(ChannelModel::from_json_str(r#"{"eta_ch":0.1,"e_mis":0.6,"p_dark":0,"eta_det":1}"#).is_err());
    }

    #[test]
    fn forced_double_clicks_tie_break_is_fair() {
        let c = reference_constants();
        let ch = ChannelModel::with_transmittance(0.0, 1.0, 0.0, 1.0 - 1e-9).unwrap();
        let physics = Physics::new(&c, &ch);
        let mut rng = stream(11, StreamRole::Physics, 0);
        let s = AliceSettings { omega: Intensity::Signal, alpha: Basis::Z, a_bit: 0 };
        let pulse = OpticalPulse::prepare(&s);
        let draws = 100_000;
        let ones = (0..draws)
            .filter(|_| physics.transmit(&pulse, Basis::Z, &mut rng).0 == Detection::Click(1))
            .count() as f64;
        let sigma = (draws as f64 * 0.25).sqrt();
        assert!((ones - draws as f64 / 2.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn vacuum_rounds_never_click_without_darks() {
        let c = reference_constants();
        let ch = ChannelModel::with_transmittance(1.0, 1.0, 0.0, 0.0).unwrap();
        let physics = Physics::new(&c, &ch);
        let (mut ra, mut rb, mut rp) = (
            stream(5, StreamRole::AliceSettings, 0),
            stream(5, StreamRole::BobSettings, 0),
            stream(5, StreamRole::Physics, 0),
        );
        for _ in 0..20_000 {
            let r = sample_round(&c, &physics, &mut ra, &mut rb, &mut rp);
            if r.omega == Intensity::Vacuum {
                assert!(!r.y());
                assert_eq!(r.n_emitted, 0);
            }
        }
    }

    #[test]
    fn sampled_click_rate_matches_closed_form() {
        let mut c = reference_constants();
        c.p_intensity = crate::params::PerIntensity::new(1.0, 0.0, 0.0);
        let ch = ChannelModel::with_loss_db(20.0, 0.2, 0.01, 1e-6).unwrap();
        let physics = Physics::new(&c, &ch);
        let (mut ra, mut rb, mut rp) = (
            stream(9, StreamRole::AliceSettings, 0),
            stream(9, StreamRole::BobSettings, 0),
            stream(9, StreamRole::Physics, 0),
        );
        let rounds = 2_000_000u64;
        let clicks = (0..rounds)
            .filter(|_| sample_round(&c, &physics, &mut ra, &mut rb, &mut rp).y())
            .count() as f64;
        let p = click_probabilities(&c, &ch, Intensity::Signal, Basis::Z, 0, Basis::Z).click();
        let mean = rounds as f64 * p;
        assert!((clicks - mean).abs() < 5.0 * mean.sqrt(), "clicks {clicks} expected {mean}");
    }

    #[test]
    fn trace_has_header_and_one_line_per_round() {
        let r = RoundOutcome {
            n_emitted: 1,
            omega: Intensity::Decoy,
            alpha: Basis::X,
            a_bit: 1,
            beta: Basis::Z,
            detection: Detection::NoClick,
        };
        let mut buf = Vec::new();
        write_trace(&mut buf, [(0, r), (1, r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], TRACE_HEADER);
        assert_eq!(lines[1], "0\tD\tX\t1\tZ\tnoclick\t-\t1");
        assert_eq!(lines.len(), 3);
    }
}
