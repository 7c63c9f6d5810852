//! Independent validators for the bound engine, the simulator and the
//! post-processing: Monte-Carlo checks of Kato's inequality, brute-force
//! sweeps of the decoy bounds, exhaustive hash-family enumeration, ground
//! truth from the simulator's hidden photon numbers and end-to-end runs.
//!
//! Every trial draws from its own seeded stream, so reports are reproducible
//! and independent of the thread count.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    decoy_coefficients, expected_observables, kato_tail_probability, phase_error_coefficients,
    security_result, security_result_with, ExpectedObservables, KatoCoefficients, KatoTail,
    Numerics,
};
use crate::channel::{
    click_probabilities, clicks_from_means, detector_means, fock_mixture, single_photon_clicks,
    ChannelModel,
};
use crate::error::{Error, Result};
use crate::params::{Basis, Intensity, PerBasis, PerIntensity, PhaseTable, ProtocolConstants};
use crate::postprocessing::{
    ec_decode, ec_syndrome, n_ec, verify_hash, BitString, EcCode, EcOptions, ToeplitzSeed,
};
use crate::protocol::{run_protocol, Outcome, RunOptions, RunOutput};
use crate::rng::{stream, StreamRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub name: String,
    pub trials: u64,
    pub violations: u64,
    pub target_eps: f64,
    pub inflation: f64,
    pub pass: bool,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl TrialReport {
    /// `pass` holds when `violations / trials <= inflation * target_eps`.
    pub fn new(name: impl Into<String>, trials: u64, violations: u64, target_eps: f64, inflation: f64, seed: u64) -> Self {
        let mut r = TrialReport {
            name: name.into(),
            trials,
            violations,
            target_eps,
            inflation,
            pass: false,
            seed,
            detail: String::new(),
        };
        r.pass = r.rate() <= inflation * target_eps;
        r
    }

    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.violations as f64 / self.trials as f64
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    /// Pools two reports of the same experiment.
    pub fn merge(&self, other: &TrialReport) -> Result<TrialReport> {
        if self.name != other.name || self.target_eps != other.target_eps || self.inflation != other.inflation {
            return Err(Error::invalid(format!("cannot merge {} with {}", self.name, other.name)));
        }
        Ok(TrialReport::new(
            self.name.clone(),
            self.trials + other.trials,
            self.violations + other.violations,
            self.target_eps,
            self.inflation,
            self.seed,
        ))
    }
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    stream(seed, StreamRole::Trial, trial)
}

/// One coefficient pair to test against simulated sums.
#[derive(Debug, Clone, Copy)]
pub struct KatoCase {
    pub a: f64,
    pub b: f64,
    pub tail: KatoTail,
}

impl From<KatoCoefficients> for KatoCase {
    fn from(k: KatoCoefficients) -> Self {
        KatoCase { a: k.a, b: k.b, tail: k.tail }
    }
}

/// Whether a realised sum `x` of `n` steps with compensator `sum_q` falls in
/// the tail event bounded by Kato's inequality for `case`.
pub fn kato_event(case: &KatoCase, n: f64, sum_q: f64, x: f64) -> bool {
    let width = (case.b + case.a * (2.0 * x / n - 1.0)) * n.sqrt();
    match case.tail {
        KatoTail::Plus => sum_q - x >= width,
        KatoTail::Minus => x - sum_q >= width,
    }
}

/// Simulates independent Bernoulli steps with probabilities `q` and counts,
/// for each case, how often the one-sided event occurs. One set of samples
/// serves every case.
pub fn kato_tail_mc_cases(q: &[f64], cases: &[KatoCase], trials: u64, seed: u64) -> Result<Vec<TrialReport>> {
    if q.is_empty() || q.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("step probabilities must be nonempty and lie in [0, 1]"));
    }
    for c in cases {
        if !(c.b >= c.a.abs()) {
            return Err(Error::domain(format!("Kato test needs b >= |a|, got a={}, b={}", c.a, c.b)));
        }
    }
    let n = q.len() as f64;
    let sum_q: f64 = q.iter().sum();
    let constant = q.iter().all(|&p| p == q[0]);
    let binomial = if constant {
        Some(Binomial::new(q.len() as u64, q[0]).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let counts = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let x = match &binomial {
                Some(b) => b.sample(&mut rng) as f64,
                None => q.iter().filter(|&&p| rng.random::<f64>() < p).count() as f64,
            };
            cases.iter().map(|c| kato_event(c, n, sum_q, x) as u64).collect::<Vec<_>>()
        })
        .reduce(|| vec![0; cases.len()], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    Ok(cases
        .iter()
        .zip(counts)
        .map(|(c, v)| {
            let target = kato_tail_probability(c.a, c.b, n, c.tail);
            TrialReport::new(format!("kato-mc/{:?}", c.tail).to_lowercase(), trials, v, target, 1.5, seed)
        })
        .collect())
}

pub fn kato_tail_mc(q: &[f64], a: f64, b: f64, tail: KatoTail, trials: u64, seed: u64) -> Result<TrialReport> {
    Ok(kato_tail_mc_cases(q, &[KatoCase { a, b, tail }], trials, seed)?.remove(0))
}

/// Draws a configuration with `mu_S > mu_D > mu_V >= 0` and a positive decoy denominator.
pub fn random_constants<R: Rng + ?Sized>(rng: &mut R, n_total: u64) -> ProtocolConstants {
    loop {
        let mu_s: f64 = rng.random_range(0.2..1.0);
        let mu_d: f64 = rng.random_range(0.01..0.9) * mu_s;
        let room = mu_d * (mu_s - mu_d) / mu_s;
        let mu_v = if rng.random::<bool>() { 0.0 } else { rng.random_range(0.0..0.5) * room.min(mu_d) };
        let p_s: f64 = rng.random_range(0.1..0.8);
        let p_v = rng.random_range(0.05..(0.95 - p_s).max(0.06));
        let p_d = 1.0 - p_s - p_v;
        let pz_a = rng.random_range(0.3..0.95);
        let pz_b = rng.random_range(0.3..0.95);
        let eps = 10f64.powf(rng.random_range(-12.0..-2.0));
        if p_d <= 0.01 {
            continue;
        }
        if let Ok(c) = ProtocolConstants::new(
            1,
            n_total,
            PerIntensity::new(p_s, p_d, p_v),
            PerIntensity::new(mu_s, mu_d, mu_v),
            PerBasis::new(pz_a, 1.0 - pz_a),
            PerBasis::new(pz_b, 1.0 - pz_b),
            16,
            0.02,
            eps,
        ) {
            return c;
        }
    }
}

/// Per-intensity yields of a photon-number channel: `sum_n p(w, n) y_n`.
fn mix(c: &ProtocolConstants, y: &[f64], conditional: bool) -> Result<PerIntensity<f64>> {
    let d = c.distributions();
    let mut out = PerIntensity::new(0.0, 0.0, 0.0);
    for w in Intensity::ALL {
        for (n, &yn) in y.iter().enumerate() {
            let p = if conditional {
                if d.total(n as u32) > 0.0 {
                    d.cond(w, n as u32)?
                } else {
                    0.0
                }
            } else {
                d.joint(w, n as u32)
            };
            out[w] += p * yn;
        }
    }
    Ok(out)
}

fn random_yields<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    match rng.random_range(0..3) {
        0 => (0..len).map(|_| rng.random::<f64>()).collect(),
        1 => (0..len).map(|_| rng.random::<bool>() as u8 as f64).collect(),
        _ => {
            let base = rng.random::<f64>();
            (0..len).map(|n| (1.0 - (1.0 - base).powi(n as i32 + 1)).clamp(0.0, 1.0)).collect()
        }
    }
}

/// Slack of the decoy lower bound for a yield vector: `p_1 y_1 - (lambda P_S + zeta P_D + gamma P_V)`,
/// together with the magnitude of the terms.
pub fn decoy_lower_bound_slack(c: &ProtocolConstants, y: &[f64]) -> Result<(f64, f64)> {
    let k = decoy_coefficients(c)?;
    let p = mix(c, y, false)?;
    let terms = [k.lambda * p.signal, k.zeta * p.decoy, k.gamma * p.vacuum];
    let truth = c.distributions().total(1) * y.get(1).copied().unwrap_or(0.0);
    Ok((truth - terms.iter().sum::<f64>(), terms.iter().map(|t| t.abs()).sum::<f64>() + truth))
}

/// Slack of the single-photon error upper bound for an error-yield vector.
pub fn phase_error_bound_slack(c: &ProtocolConstants, e: &[f64]) -> Result<(f64, f64)> {
    let k = phase_error_coefficients(c)?;
    let p = mix(c, e, true)?;
    let bound = k.single_photon_error_bound(p.decoy, p.vacuum);
    let truth = e.get(1).copied().unwrap_or(0.0);
    Ok((bound - truth, k.decoy * p.decoy + k.vacuum * p.vacuum + truth))
}

const ORACLE_REL_SLACK: f64 = 1e-12;

/// Random configurations and yield vectors against the decoy lower bound.
pub fn decoy_soundness_mc(trials: u64, seed: u64) -> Result<TrialReport> {
    let violations: u64 = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<u64> {
            let mut rng = trial_rng(seed, t);
            let c = random_constants(&mut rng, 1_000_000);
            let len = c.distributions().table_max() as usize + 1;
            let y = random_yields(&mut rng, len);
            let (slack, scale) = decoy_lower_bound_slack(&c, &y)?;
            Ok((slack < -ORACLE_REL_SLACK * scale) as u64)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(TrialReport::new("decoy/lower-bound", trials, violations, 0.0, 1.0, seed))
}

/// Random configurations and error-yield vectors against the phase-error upper bound.
pub fn phase_error_soundness_mc(trials: u64, seed: u64) -> Result<TrialReport> {
    let violations: u64 = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<u64> {
            let mut rng = trial_rng(seed, t);
            let c = random_constants(&mut rng, 1_000_000);
            let len = c.distributions().table_max() as usize + 1;
            let e = random_yields(&mut rng, len);
            let (slack, scale) = phase_error_bound_slack(&c, &e)?;
            Ok((slack < -ORACLE_REL_SLACK * scale) as u64)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(TrialReport::new("decoy/phase-error-bound", trials, violations, 0.0, 1.0, seed))
}

/// `K p_1 = mu_D (mu_S - mu_D) / mu_S - mu_V` over random configurations.
pub fn denominator_identity_check(trials: u64, seed: u64, tolerance: f64) -> Result<TrialReport> {
    let mut violations = 0;
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let c = random_constants(&mut rng, 1_000_000);
        let k = decoy_coefficients(&c)?;
        let mu = c.mu;
        let want = mu.decoy * (mu.signal - mu.decoy) / mu.signal - mu.vacuum;
        let got = k.denominator * c.distributions().total(1);
        let rel = ((got - want) / want).abs();
        worst = worst.max(rel);
        violations += (rel > tolerance) as u64;
    }
    Ok(TrialReport::new("decoy/denominator-identity", trials, violations, 0.0, 1.0, seed)
        .with_detail(format!("worst relative error {worst:.2e}")))
}

/// Ground truth of one recorded run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_n1z: u64,
    pub proxy_nph: u64,
    pub n1z_floor: u64,
    pub nph_ceil: u64,
    pub n1z_holds: bool,
    pub nph_holds: bool,
}

/// Probability of an X-basis error given a click for a single photon, averaged over the bit.
pub fn single_photon_phase_error_rate(c: &ProtocolConstants, ch: &ChannelModel) -> f64 {
    let (mut err, mut click) = (0.0, 0.0);
    for a in 0..2u8 {
        let p = single_photon_clicks(ch, c.theta.phase(a, Basis::X), Basis::X);
        err += p.error_against(a);
        click += p.click();
    }
    if click > 0.0 {
        err / click
    } else {
        0.0
    }
}

/// Counts the true single-photon sifted detections of a recorded run and a
/// proxy phase-error count, drawing for each of them an X-basis error at the
/// channel's single-photon rate. Only channel-model quantities feed the
/// proxy.
pub fn ground_truth_bounds(c: &ProtocolConstants, ch: &ChannelModel, run: &RunOutput, seed: u64) -> Result<GroundTruth> {
    let rounds = run.rounds.as_ref().ok_or_else(|| Error::invalid("run was not recorded"))?;
    let e1 = single_photon_phase_error_rate(c, ch);
    let mut rng = stream(seed, StreamRole::Counterfactual, 0);
    let mut true_n1z = 0;
    let mut proxy_nph = 0;
    for r in rounds {
        if r.n_emitted == 1 && r.alpha == Basis::Z && r.beta == Basis::Z && r.y() {
            true_n1z += 1;
            proxy_nph += (rng.random::<f64>() < e1) as u64;
        }
    }
    let n1z_floor = run.security.n1z_lower;
    let nph_ceil = run.security.nph_upper;
    Ok(GroundTruth {
        true_n1z,
        proxy_nph,
        n1z_floor,
        nph_ceil,
        n1z_holds: true_n1z >= n1z_floor,
        nph_holds: proxy_nph <= nph_ceil,
    })
}

/// Honest runs checked against their ground truth. `expected` overrides the
/// public expected counts, e.g. to make them deliberately optimistic.
pub fn ground_truth_mc(
    c: &ProtocolConstants,
    ch: &ChannelModel,
    runs: u64,
    seed: u64,
    expected: Option<ExpectedObservables>,
) -> Result<(TrialReport, Vec<GroundTruth>)> {
    let truths: Vec<GroundTruth> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let run_seed: u64 = trial_rng(seed, i).random();
            let opts = RunOptions { seed: run_seed, record_rounds: true, expected, ..Default::default() };
            let run = run_protocol(c, ch, &opts)?;
            ground_truth_bounds(c, ch, &run, run_seed)
        })
        .collect::<Result<_>>()?;
    let failures = truths.iter().filter(|t| !(t.n1z_holds && t.nph_holds)).count() as u64;
    let target = c.eps_secrecy * c.eps_secrecy / 4.0;
    let mean = |f: fn(&GroundTruth) -> u64| truths.iter().map(|t| f(t) as f64).sum::<f64>() / truths.len().max(1) as f64;
    let detail = format!(
        "mean true N1Z {:.1} vs floor {:.1}; mean proxy Nph {:.1} vs ceil {:.1}",
        mean(|t| t.true_n1z),
        mean(|t| t.n1z_floor),
        mean(|t| t.proxy_nph),
        mean(|t| t.nph_ceil)
    );
    Ok((TrialReport::new("ground-truth", runs, failures, target, 3.0, seed).with_detail(detail), truths))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Belief propagation as used by the protocol.
    Honest,
    /// Uniformly random error vectors.
    Sabotaged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessStats {
    pub report: TrialReport,
    pub accepted: u64,
    pub accepted_equal: u64,
}

/// Bit-error rate of the sifted key under the honest channel.
pub fn sifted_error_rate(c: &ProtocolConstants, ch: &ChannelModel) -> f64 {
    let (mut err, mut click) = (0.0, 0.0);
    for w in Intensity::ALL {
        for a in 0..2u8 {
            let p = click_probabilities(c, ch, w, Basis::Z, a, Basis::Z);
            err += c.p_intensity[w] * p.error_against(a);
            click += c.p_intensity[w] * p.click();
        }
    }
    if click > 0.0 {
        err / click
    } else {
        0.0
    }
}

/// Flips each bit independently with probability `p`, skipping geometrically.
fn flip_bits<R: Rng + ?Sized>(k: &mut BitString, p: f64, rng: &mut R) {
    if p <= 0.0 {
        return;
    }
    if p >= 1.0 {
        (0..k.len()).for_each(|i| k.flip(i));
        return;
    }
    let gap = Geometric::new(p).expect("p in (0, 1)");
    let mut i = gap.sample(rng);
    while (i as usize) < k.len() {
        k.flip(i as usize);
        i += 1 + gap.sample(rng);
    }
}

/// Reconciliation and verification on sifted keys of the expected length
/// for `(c, ch)`: counts runs that pass verification with unequal keys.
pub fn correctness_mc(
    c: &ProtocolConstants,
    ch: &ChannelModel,
    trials: u64,
    decoder: DecoderKind,
    seed: u64,
) -> Result<CorrectnessStats> {
    let n_sift = expected_observables(c, ch).rounded().n_sift as usize;
    let n_ec_bits = (n_ec(n_sift as u64, c.e_bit_assumed, EcOptions::default().efficiency)? as usize).min(n_sift);
    let n_verify = c.n_verify as usize;
    if n_sift == 0 || n_verify > n_sift {
        return Err(Error::invalid(format!("expected sifted key of {n_sift} bits is too short")));
    }
    let code = EcCode::new(n_sift, n_ec_bits, c.e_bit_assumed)?;
    let qber = sifted_error_rate(c, ch);
    let (accepted, equal, bad) = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<(u64, u64, u64)> {
            let mut rng = trial_rng(seed, t);
            let k_a = BitString::random(n_sift, &mut rng);
            let mut k_b = k_a.clone();
            flip_bits(&mut k_b, qber, &mut rng);
            let e = match decoder {
                DecoderKind::Honest => ec_decode(&k_b, &ec_syndrome(&k_a, &code)?, &code)?,
                DecoderKind::Sabotaged => BitString::random(n_sift, &mut rng),
            };
            let reconciled = k_b.xor(&e)?;
            let seed = ToeplitzSeed::verify(rng.random(), n_verify, n_sift)?;
            let ok = verify_hash(&k_a, &seed, n_verify)? == verify_hash(&reconciled, &seed, n_verify)?;
            let same = reconciled == k_a;
            Ok((ok as u64, (ok && same) as u64, (ok && !same) as u64))
        })
        .try_reduce(|| (0, 0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1, a.2 + b.2)))?;
    let name = match decoder {
        DecoderKind::Honest => "correctness/honest",
        DecoderKind::Sabotaged => "correctness/sabotaged",
    };
    let report = TrialReport::new(name, trials, bad, 0.5f64.powi(c.n_verify as i32), 1.5, seed)
        .with_detail(format!("{accepted} accepted, {equal} with equal keys, sifted length {n_sift}, QBER {qber:.4}"));
    Ok(CorrectnessStats { report, accepted, accepted_equal: equal })
}

fn all_bitstrings(n: usize) -> Vec<BitString> {
    (0u64..1 << n).map(|v| BitString::from_bits((0..n).map(|i| v >> i & 1 == 1))).collect()
}

fn index_of(b: &BitString) -> usize {
    b.iter().enumerate().map(|(i, v)| (v as usize) << i).sum()
}

/// Exhaustive universal2 check of the verification hash: for every pair of
/// distinct inputs, the fraction of seeds on which they collide.
pub fn verify_hash_collisions(n: usize, m: usize) -> Result<TrialReport> {
    let inputs = all_bitstrings(n);
    let seeds = all_bitstrings(n - 1);
    let pairs = inputs.len() * (inputs.len() - 1) / 2;
    let mut collisions = vec![0u32; pairs];
    for d in &seeds {
        let seed = ToeplitzSeed::from_diagonal(m, n, d.clone())?;
        let table: Vec<usize> = inputs.iter().map(|k| verify_hash(k, &seed, m).map(|h| index_of(&h))).collect::<Result<_>>()?;
        let mut p = 0;
        for i in 0..table.len() {
            for j in i + 1..table.len() {
                collisions[p] += (table[i] == table[j]) as u32;
                p += 1;
            }
        }
    }
    let bound = 0.5f64.powi(m as i32);
    let ns = seeds.len() as f64;
    let worst = collisions.iter().map(|&c| c as f64 / ns).fold(0.0, f64::max);
    let mean = collisions.iter().map(|&c| c as f64).sum::<f64>() / (ns * pairs as f64);
    let violations = collisions.iter().filter(|&&c| c as f64 / ns > bound).count() as u64;
    Ok(TrialReport::new(format!("hash/universal2 n={n} m={m}"), pairs as u64, violations, 0.0, 1.0, 0)
        .with_detail(format!("worst pair {worst:.5}, mean {mean:.5}, bound {bound:.5}")))
}

/// Exhaustive dual-universal2 check of the PA hash: for every nonzero `y`,
/// the fraction of seeds whose kernel's orthogonal space contains `y`.
pub fn pa_dual_universal(n: usize, m: usize) -> Result<TrialReport> {
    let inputs = all_bitstrings(n);
    let seeds = all_bitstrings(n - 1);
    let mut hits = vec![0u32; inputs.len()];
    for d in &seeds {
        let seed = ToeplitzSeed::from_diagonal(m, n, d.clone())?;
        let mut kernel = Vec::new();
        for x in &inputs {
            if crate::postprocessing::pa_hash(x, &seed, m)?.count_ones() == 0 {
                kernel.push(x);
            }
        }
        for (i, y) in inputs.iter().enumerate().skip(1) {
            let mut orthogonal = true;
            for x in &kernel {
                if y.dot(x)? {
                    orthogonal = false;
                    break;
                }
            }
            hits[i] += orthogonal as u32;
        }
    }
    let bound = 0.5f64.powi((n - m) as i32);
    let ns = seeds.len() as f64;
    let worst = hits.iter().skip(1).map(|&h| h as f64 / ns).fold(0.0, f64::max);
    let violations = hits.iter().skip(1).filter(|&&h| h as f64 / ns > bound).count() as u64;
    Ok(TrialReport::new(format!("hash/dual-universal2 n={n} m={m}"), (inputs.len() - 1) as u64, violations, 0.0, 1.0, 0)
        .with_detail(format!("worst vector {worst:.5}, bound {bound:.5}")))
}

/// Fraction of seeds for which every `m`-bit output is attained.
pub fn hash_surjectivity(n: usize, m: usize) -> Result<TrialReport> {
    let inputs = all_bitstrings(n);
    let seeds = all_bitstrings(n - 1);
    let mut failures = 0;
    for d in &seeds {
        let seed = ToeplitzSeed::from_diagonal(m, n, d.clone())?;
        let mut seen = vec![false; 1 << m];
        for k in &inputs {
            seen[index_of(&seed.apply(k)?)] = true;
        }
        failures += seen.iter().any(|s| !s) as u64;
    }
    Ok(TrialReport::new(format!("hash/surjective n={n} m={m}"), seeds.len() as u64, failures, 0.0, 1.0, 0))
}

/// Poisson-mixed Fock-space click probabilities against the closed form on
/// `points` grid points, each covering all four phase settings and both bases.
pub fn fock_agreement(points: u64, tolerance: f64) -> Result<TrialReport> {
    let per_axis = (points as f64).powf(0.25).ceil() as u64;
    let lerp = |i: u64, lo: f64, hi: f64| lo + (hi - lo) * i as f64 / (per_axis - 1).max(1) as f64;
    let mut grid = Vec::new();
    'outer: for i in 0..per_axis {
        for j in 0..per_axis {
            for k in 0..per_axis {
                for l in 0..per_axis {
                    if grid.len() as u64 == points {
                        break 'outer;
                    }
                    grid.push((lerp(i, 0.0, 0.7), lerp(j, 0.0, 1.0), lerp(k, 0.0, 0.5), lerp(l, 0.0, 0.05)));
                }
            }
        }
    }
    let theta = PhaseTable::STANDARD;
    let mut violations = 0;
    let mut worst = 0.0f64;
    for &(mu, eta, e_mis, d) in &grid {
        let ch = ChannelModel::with_transmittance(eta, 1.0, e_mis, d)?;
        for basis in Basis::ALL {
            for bit in 0..2u8 {
                let th = theta.phase(bit, basis);
                for beta in Basis::ALL {
                    let (m0, m1) = detector_means(mu, &ch, th, beta);
                    let diff = clicks_from_means(m0, m1, d).max_abs_diff(&fock_mixture(mu, &ch, th, beta)?);
                    worst = worst.max(diff);
                    violations += (diff > tolerance) as u64;
                }
            }
        }
    }
    Ok(TrialReport::new("fock-agreement", grid.len() as u64, violations, 0.0, 1.0, 0)
        .with_detail(format!("worst absolute difference {worst:.2e}")))
}

/// Full seeded runs: non-aborted runs must end with equal keys, and every
/// `replay_every`-th run is repeated and must reproduce its transcript and keys.
pub fn end_to_end(c: &ProtocolConstants, ch: &ChannelModel, runs: u64, replay_every: u64, seed: u64) -> Result<TrialReport> {
    let results: Vec<(u64, bool)> = (0..runs)
        .into_par_iter()
        .map(|i| -> Result<(u64, bool)> {
            let opts = RunOptions { seed: trial_rng(seed, i).random(), ..Default::default() };
            let run = run_protocol(c, ch, &opts)?;
            let mut bad = (run.outcome == Outcome::Key && run.alice.final_key != run.bob.final_key) as u64;
            bad += (run.outcome != Outcome::Key && !(run.alice.final_key.is_empty() && run.bob.final_key.is_empty())) as u64;
            if replay_every > 0 && i % replay_every == 0 {
                let again = run_protocol(c, ch, &opts)?;
                bad += (again.transcript.to_bytes() != run.transcript.to_bytes() || again.alice != run.alice || again.bob != run.bob) as u64;
            }
            Ok((bad, run.outcome == Outcome::Key))
        })
        .collect::<Result<_>>()?;
    let violations = results.iter().map(|r| r.0).sum();
    let keys = results.iter().filter(|r| r.1).count();
    Ok(TrialReport::new("end-to-end", runs, violations, 0.0, 1.0, seed)
        .with_detail(format!("{keys} of {runs} runs produced a key")))
}

/// Compares the conservative `N_PA` with evaluations whose intermediates are
/// perturbed by up to `rel`; a perturbed value above the conservative one is
/// a violation.
pub fn rounding_audit(configs: u64, perturbations: u64, rel: f64, seed: u64) -> Result<TrialReport> {
    let mut violations = 0;
    let mut above_plain = 0;
    for t in 0..configs {
        let mut rng = trial_rng(seed, t);
        let n = 10f64.powf(rng.random_range(5.0..9.0)) as u64;
        let c = random_constants(&mut rng, n);
        let ch = ChannelModel::with_loss_db(rng.random_range(0.0..25.0), rng.random_range(0.1..1.0), rng.random_range(0.0..0.03), 10f64.powf(rng.random_range(-8.0..-5.0)))?;
        let exp = expected_observables(&c, &ch);
        let obs = exp.rounded();
        let n_ec_bits = n_ec(obs.n_sift, c.e_bit_assumed, 1.16)?;
        let reference = security_result(&c, &obs, &exp, n_ec_bits)?.n_pa;
        let plain = security_result_with(&c, &obs, &exp, n_ec_bits, &mut Numerics::plain())?.n_pa;
        let mut worse = false;
        for p in 0..perturbations {
            let mut num = Numerics::perturbed(seed ^ (t << 20) ^ p, rel);
            let n_pa = security_result_with(&c, &obs, &exp, n_ec_bits, &mut num)?.n_pa;
            worse |= n_pa > reference;
            above_plain += (n_pa > plain) as u64;
        }
        violations += worse as u64;
    }
    Ok(TrialReport::new("rounding-audit", configs, violations, 0.0, 1.0, seed).with_detail(format!(
        "{above_plain} of {} perturbed evaluations exceed the margin-free value",
        configs * perturbations
    )))
}

/// Plug-back of engine coefficients into their tail equations.
pub fn kato_plugback(cases: u64, seed: u64, tolerance: f64) -> Result<TrialReport> {
    let mut rng = trial_rng(seed, 0);
    let mut violations = 0;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let s = 10f64.powf(rng.random_range(4.0..8.0));
        let t = rng.random_range(0.01..0.99) * s;
        let eps = 10f64.powf(rng.random_range(-20.0..-1.0));
        for k in [KatoCoefficients::plus(s, t, eps)?, KatoCoefficients::minus(s, t, eps)?] {
            let rel = ((k.tail_probability(s) - eps) / eps).abs();
            worst = worst.max(rel);
            violations += (rel > tolerance || k.b < k.a.abs()) as u64;
        }
    }
    Ok(TrialReport::new("kato-plugback", 2 * cases, violations, 0.0, 1.0, seed)
        .with_detail(format!("worst relative error {worst:.2e}")))
}

/// The validation suites, one per checked property.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    KatoPlugback,
    KatoMc,
    Decoy,
    GroundTruth,
    Correctness,
    Hash,
    Fock,
    EndToEnd,
    Rounding,
}

impl Suite {
    pub const ALL: [Suite; 9] = [
        Suite::KatoPlugback,
        Suite::KatoMc,
        Suite::Decoy,
        Suite::GroundTruth,
        Suite::Correctness,
        Suite::Hash,
        Suite::Fock,
        Suite::EndToEnd,
        Suite::Rounding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::KatoPlugback => "kato-plugback",
            Suite::KatoMc => "kato-mc",
            Suite::Decoy => "decoy",
            Suite::GroundTruth => "ground-truth",
            Suite::Correctness => "correctness",
            Suite::Hash => "hash",
            Suite::Fock => "fock",
            Suite::EndToEnd => "end-to-end",
            Suite::Rounding => "rounding",
        }
    }

    pub fn from_name(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Trial count of the full-size suite.
    pub fn default_trials(self) -> u64 {
        match self {
            Suite::KatoPlugback => 200,
            Suite::KatoMc => 100_000,
            Suite::Decoy => 10_000,
            Suite::GroundTruth => 1_000,
            Suite::Correctness => 100_000,
            Suite::Hash => 1,
            Suite::Fock => 200,
            Suite::EndToEnd => 1_000,
            Suite::Rounding => 100,
        }
    }
}

/// Honest 20 dB link at `N = 10^6`, used for ground-truth coverage.
pub fn ground_truth_scenario() -> (ProtocolConstants, ChannelModel) {
    let c = ProtocolConstants::new(
        100,
        10_000,
        PerIntensity::new(0.7, 0.2, 0.1),
        PerIntensity::new(0.5, 0.1, 1e-3),
        PerBasis::new(0.8, 0.2),
        PerBasis::new(0.8, 0.2),
        16,
        0.03,
        1e-6,
    )
    .expect("valid scenario");
    let ch = ChannelModel::with_loss_db(20.0, 0.2, 0.01, 1e-6).expect("valid channel");
    (c, ch)
}

/// Lossless link at `N = 10^6` whose bounds are far from trivial.
pub fn informative_scenario() -> (ProtocolConstants, ChannelModel) {
    let c = ProtocolConstants::new(
        20,
        50_000,
        PerIntensity::new(0.7, 0.25, 0.05),
        PerIntensity::new(0.6, 0.2, 0.0),
        PerBasis::new(0.7, 0.3),
        PerBasis::new(0.7, 0.3),
        16,
        0.03,
        1e-6,
    )
    .expect("valid scenario");
    let ch = ChannelModel::with_transmittance(1.0, 1.0, 0.01, 1e-7).expect("valid channel");
    (c, ch)
}

/// Short low-noise link at `N = 10^5` that yields a key in most runs.
pub fn end_to_end_scenario() -> (ProtocolConstants, ChannelModel) {
    let c = ProtocolConstants::new(
        10,
        10_000,
        PerIntensity::new(0.3, 0.63, 0.07),
        PerIntensity::new(0.8, 0.23, 0.0),
        PerBasis::new(0.67, 0.33),
        PerBasis::new(0.67, 0.33),
        16,
        0.02,
        1e-2,
    )
    .expect("valid scenario");
    let ch = ChannelModel::with_transmittance(1.0, 1.0, 0.01, 1e-7).expect("valid channel");
    (c, ch)
}

/// Link used by the correctness Monte Carlo, with `N_verify = 8`.
pub fn correctness_scenario() -> (ProtocolConstants, ChannelModel) {
    let (mut c, ch) = end_to_end_scenario();
    c.n_verify = 8;
    (c, ch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Overrides [`Suite::default_trials`].
    pub trials: Option<u64>,
}

/// Runs one suite, returning its reports and the elapsed wall time in seconds.
pub fn run_suite(suite: Suite, opts: &SuiteOptions) -> Result<(Vec<TrialReport>, f64)> {
    let start = Instant::now();
    let trials = opts.trials.unwrap_or(suite.default_trials());
    let seed = opts.seed;
    let reports = match suite {
        Suite::KatoPlugback => vec![kato_plugback(trials, seed, 1e-9)?],
        Suite::KatoMc => {
            let n = 10_000usize;
            let profiles: Vec<(String, Vec<f64>)> = vec![
                ("q=0.05".into(), vec![0.05; n]),
                ("q=0.5".into(), vec![0.5; n]),
                ("ramp 0-0.1".into(), (0..n).map(|i| 0.1 * i as f64 / (n - 1) as f64).collect()),
            ];
            let mut out = Vec::new();
            for (label, q) in profiles {
                let t: f64 = q.iter().sum();
                let mut cases = Vec::new();
                let mut names = Vec::new();
                for eps in [1e-2, 1e-3] {
                    for k in [KatoCoefficients::plus(n as f64, t, eps)?, KatoCoefficients::minus(n as f64, t, eps)?] {
                        cases.push(KatoCase::from(k));
                        names.push(format!("kato-mc/{label}/eps={eps:e}/{:?}", k.tail).to_lowercase());
                    }
                }
                for (mut r, name) in kato_tail_mc_cases(&q, &cases, trials, seed)?.into_iter().zip(names) {
                    r.name = name;
                    out.push(r);
                }
            }
            out
        }
        Suite::Decoy => vec![
            decoy_soundness_mc(trials, seed)?,
            phase_error_soundness_mc(trials, seed.wrapping_add(1))?,
            denominator_identity_check(trials.min(1_000), seed, 1e-10)?,
        ],
        Suite::GroundTruth => {
            let (c, ch) = ground_truth_scenario();
            let mut r = ground_truth_mc(&c, &ch, trials, seed, None)?.0;
            r.name = "ground-truth/20db".into();
            let (c, ch) = informative_scenario();
            let mut l = ground_truth_mc(&c, &ch, (trials / 10).max(1), seed.wrapping_add(1), None)?.0;
            l.name = "ground-truth/lossless".into();
            vec![r, l]
        }
        Suite::Correctness => {
            let (c, ch) = correctness_scenario();
            vec![correctness_mc(&c, &ch, trials, DecoderKind::Sabotaged, seed)?.report]
        }
        Suite::Hash => vec![verify_hash_collisions(10, 4)?, pa_dual_universal(8, 3)?, hash_surjectivity(10, 4)?, hash_surjectivity(8, 3)?],
        Suite::Fock => vec![fock_agreement(trials, 1e-6)?],
        Suite::EndToEnd => {
            let (c, ch) = end_to_end_scenario();
            vec![end_to_end(&c, &ch, trials, 10, seed)?]
        }
        Suite::Rounding => vec![rounding_audit(trials, 20, 1e-9, seed)?],
    };
    Ok((reports, start.elapsed().as_secs_f64()))
}
