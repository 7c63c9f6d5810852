//! Finite-key bound engine: Kato deviation functions, decoy-state
//! coefficients, the lower bound on single-photon Z detections, the upper
//! bound on phase errors, the privacy-amplification amount and the final
//! key length with its security-parameter budget.
//!
//! Every rounding step moves in the direction that enlarges `N_PA`. Each
//! bound is shifted by a directed margin of [`SLACK`] times the magnitude of
//! its constituent terms before it is floored or ceiled.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{click_probabilities, single_photon_clicks, ChannelModel};
use crate::error::{Error, Result};
use crate::params::{entropy_h, Basis, Intensity, ProtocolConstants};
use crate::rng::{stream, StreamRole};

/// Relative margin applied to every bound before rounding.
pub const SLACK: f64 = 1e-8;

/// Relative upward nudge of every `b` coefficient, a few units in the last place.
const B_ROUND_UP: f64 = 8.0 * f64::EPSILON;

/// The five observed counts and the sifted-key length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observables {
    pub n_sift_s: u64,
    pub n_sift_d: u64,
    pub n_sift_v: u64,
    pub n_err_dx: u64,
    pub n_err_vx: u64,
    pub n_sift: u64,
}

impl Observables {
    pub fn new(n_sift_s: u64, n_sift_d: u64, n_sift_v: u64, n_err_dx: u64, n_err_vx: u64) -> Self {
        Observables {
            n_sift_s,
            n_sift_d,
            n_sift_v,
            n_err_dx,
            n_err_vx,
            n_sift: n_sift_s + n_sift_d + n_sift_v,
        }
    }

    pub fn sift(&self, w: Intensity) -> u64 {
        match w {
            Intensity::Signal => self.n_sift_s,
            Intensity::Decoy => self.n_sift_d,
            Intensity::Vacuum => self.n_sift_v,
        }
    }

    pub fn validate(&self, n: u64) -> Result<()> {
        if self.n_sift != self.n_sift_s + self.n_sift_d + self.n_sift_v {
            return Err(Error::invalid("n_sift must equal n_sift_s + n_sift_d + n_sift_v"));
        }
        if self.n_sift > n || self.n_err_dx > n || self.n_err_vx > n {
            return Err(Error::invalid(format!("observed counts exceed N = {n}")));
        }
        Ok(())
    }
}

/// Expected values of the observables, fixed before the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedObservables {
    pub n_sift_s: f64,
    pub n_sift_d: f64,
    pub n_sift_v: f64,
    pub n_err_dx: f64,
    pub n_err_vx: f64,
    pub n_1z: f64,
    pub n_ph: f64,
}

impl ExpectedObservables {
    pub fn validate(&self, n: u64) -> Result<()> {
        let n = n as f64;
        for (name, v) in [
            ("n_sift_s", self.n_sift_s),
            ("n_sift_d", self.n_sift_d),
            ("n_sift_v", self.n_sift_v),
            ("n_err_dx", self.n_err_dx),
            ("n_err_vx", self.n_err_vx),
            ("n_1z", self.n_1z),
            ("n_ph", self.n_ph),
        ] {
            if !(0.0..=n).contains(&v) {
                return Err(Error::invalid(format!("expected {name} = {v} outside [0, N]")));
            }
        }
        Ok(())
    }

    /// Every field multiplied by `factor` and clipped to `[0, n]`.
    pub fn scaled(&self, factor: f64, n: u64) -> Self {
        let f = |v: f64| (v * factor).clamp(0.0, n as f64);
        ExpectedObservables {
            n_sift_s: f(self.n_sift_s),
            n_sift_d: f(self.n_sift_d),
            n_sift_v: f(self.n_sift_v),
            n_err_dx: f(self.n_err_dx),
            n_err_vx: f(self.n_err_vx),
            n_1z: f(self.n_1z),
            n_ph: f(self.n_ph),
        }
    }

    /// The expected counts rounded to integers, as a stand-in for an observed run.
    /// Plug-in estimates from the observed counts themselves: the decoy
    /// combinations without fluctuation terms, clamped to `[0, N]`.
    pub fn from_observed(c: &ProtocolConstants, obs: &Observables) -> Result<Self> {
        obs.validate(c.n())?;
        let n = c.n() as f64;
        let k = decoy_coefficients(c)?;
        let p = phase_error_coefficients(c)?;
        let f = |x: u64| x as f64;
        let n_1z = k.lambda * f(obs.n_sift_s) + k.zeta * f(obs.n_sift_d) + k.gamma * f(obs.n_sift_v);
        let n_ph = p.basis_ratio * (p.decoy * f(obs.n_err_dx) - p.vacuum * f(obs.n_err_vx));
        Ok(ExpectedObservables {
            n_sift_s: f(obs.n_sift_s),
            n_sift_d: f(obs.n_sift_d),
            n_sift_v: f(obs.n_sift_v),
            n_err_dx: f(obs.n_err_dx),
            n_err_vx: f(obs.n_err_vx),
            n_1z: n_1z.clamp(0.0, n),
            n_ph: n_ph.clamp(0.0, n),
        })
    }

    pub fn rounded(&self) -> Observables {
        let r = |v: f64| v.round() as u64;
        Observables::new(r(self.n_sift_s), r(self.n_sift_d), r(self.n_sift_v), r(self.n_err_dx), r(self.n_err_vx))
    }
}

/// Which tail of Kato's inequality a coefficient pair is tuned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KatoTail {
    /// Tail with denominator `(1 + 4a / (3 sqrt s))^2`.
    Plus,
    /// Tail with denominator `(1 - 4a / (3 sqrt s))^2`.
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KatoCoefficients {
    pub a: f64,
    pub b: f64,
    pub tail_eps: f64,
    pub tail: KatoTail,
}

impl KatoCoefficients {
    pub fn plus(s: f64, t: f64, eps: f64) -> Result<Self> {
        let a = kato_a(s, t, eps)?;
        Ok(KatoCoefficients { a, b: b_from_a(s, a, eps, KatoTail::Plus), tail_eps: eps, tail: KatoTail::Plus })
    }

    pub fn minus(s: f64, t: f64, eps: f64) -> Result<Self> {
        let a = kato_a_prime(s, t, eps)?;
        Ok(KatoCoefficients { a, b: b_from_a(s, a, eps, KatoTail::Minus), tail_eps: eps, tail: KatoTail::Minus })
    }

    /// Failure probability `exp[-(2b^2 - 2a^2) / (1 +- 4a / (3 sqrt s))^2]` of this pair over `s` steps.
    pub fn tail_probability(&self, s: f64) -> f64 {
        kato_tail_probability(self.a, self.b, s, self.tail)
    }
}

/// Right-hand side of Kato's inequality for a given `(a, b)`.
pub fn kato_tail_probability(a: f64, b: f64, s: f64, tail: KatoTail) -> f64 {
    let r = 4.0 * a / (3.0 * s.sqrt());
    let d = match tail {
        KatoTail::Plus => 1.0 + r,
        KatoTail::Minus => 1.0 - r,
    };
    // (b - a)(b + a) avoids cancelling b^2 against a^2
    (-2.0 * (b - a) * (b + a) / (d * d)).exp()
}

fn check_kato_domain(s: f64, t: f64, eps: f64) -> Result<f64> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::domain(format!("Kato s must be positive, got {s}")));
    }
    if !(t >= 0.0 && t <= s) {
        return Err(Error::domain(format!("Kato t must lie in [0, s], got t={t}, s={s}")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::domain(format!("Kato eps must lie in (0, 1), got {eps}")));
    }
    Ok(eps.ln())
}

fn kato_a_signed(s: f64, t: f64, eps: f64, sign: f64) -> Result<f64> {
    let l = check_kato_domain(s, t, eps)?;
    let q = 9.0 * t * (s - t) - 2.0 * s * l;
    let disc = -l * q;
    if !(disc > 0.0) {
        return Err(Error::domain(format!("Kato discriminant {disc} is not positive")));
    }
    let rs = s.sqrt();
    let num = sign * (216.0 * rs * t * (s - t) * l - 48.0 * s * rs * l * l)
        + 27.0 * std::f64::consts::SQRT_2 * (s - 2.0 * t) * s * disc.sqrt();
    let den = 4.0 * (9.0 * s - 8.0 * l) * q;
    let a = num / den;
    if !a.is_finite() {
        return Err(Error::domain("Kato coefficient is not finite"));
    }
    Ok(a)
}

/// `a_K(s, t, eps)`, tuned to the plus tail.
pub fn kato_a(s: f64, t: f64, eps: f64) -> Result<f64> {
    kato_a_signed(s, t, eps, 1.0)
}

/// `a'_K(s, t, eps)`, tuned to the minus tail.
pub fn kato_a_prime(s: f64, t: f64, eps: f64) -> Result<f64> {
    kato_a_signed(s, t, eps, -1.0)
}

/// `b` solving the tail equation for a given `a`. The radicand
/// `18 a^2 s - (16 a^2 +- 24 a sqrt s + 9 s) ln eps` is evaluated as
/// `18 a^2 s - (4a +- 3 sqrt s)^2 ln eps`.
fn b_from_a(s: f64, a: f64, eps: f64, tail: KatoTail) -> f64 {
    let l = eps.ln();
    let rs = s.sqrt();
    let lin = match tail {
        KatoTail::Plus => 4.0 * a + 3.0 * rs,
        KatoTail::Minus => 4.0 * a - 3.0 * rs,
    };
    let b = (18.0 * a * a * s - lin * lin * l).sqrt() / (3.0 * (2.0 * s).sqrt());
    (b * (1.0 + B_ROUND_UP)).max(a.abs())
}

/// `b_K(s, t, eps)`, paired with [`kato_a`].
pub fn kato_b(s: f64, t: f64, eps: f64) -> Result<f64> {
    Ok(KatoCoefficients::plus(s, t, eps)?.b)
}

/// `b'_K(s, t, eps)`, paired with [`kato_a_prime`].
pub fn kato_b_prime(s: f64, t: f64, eps: f64) -> Result<f64> {
    Ok(KatoCoefficients::minus(s, t, eps)?.b)
}

/// Coefficients of the decoy lower bound on the single-photon detection
/// probability: `p_1 >= lambda p_S + zeta p_D + gamma p_V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyCoefficients {
    pub lambda: f64,
    pub zeta: f64,
    pub gamma: f64,
    /// The shared denominator `-(mu_D/mu_S)^2 p_{S|1}/p_{S,0} + p_{D|1}/p_{D,0} - p_{V|1}/p_{V,0}`.
    pub denominator: f64,
}

pub fn decoy_coefficients(c: &ProtocolConstants) -> Result<DecoyCoefficients> {
    let mu = &c.mu;
    if !(mu.signal > mu.decoy && mu.decoy > mu.vacuum && mu.vacuum >= 0.0) {
        return Err(Error::domain("decoy coefficients need mu_S > mu_D > mu_V >= 0"));
    }
    let d = c.distributions();
    let joint0 = |w| d.joint(w, 0);
    for w in Intensity::ALL {
        if !(joint0(w) > 0.0) {
            return Err(Error::domain(format!("p_{w} must be positive for the decoy bound")));
        }
    }
    let kappa = (mu.decoy / mu.signal).powi(2);
    let s = d.cond(Intensity::Signal, 1)?;
    let dd = d.cond(Intensity::Decoy, 1)?;
    let v = d.cond(Intensity::Vacuum, 1)?;
    let k = -kappa * s / joint0(Intensity::Signal) + dd / joint0(Intensity::Decoy)
        - v / joint0(Intensity::Vacuum);
    if !(k > 0.0) {
        return Err(Error::domain(format!("decoy denominator {k} is not positive")));
    }
    Ok(DecoyCoefficients {
        lambda: -kappa / (k * joint0(Intensity::Signal)),
        zeta: 1.0 / (k * joint0(Intensity::Decoy)),
        gamma: -1.0 / (k * joint0(Intensity::Vacuum)),
        denominator: k,
    })
}

/// Coefficients of the decoy upper bound on the single-photon X-basis error
/// probability: `p_1^err <= vacuum_factor (p_D^err / p_{D|1} - p_{D|0} p_V^err / (p_{D|1} p_{V|0}))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseErrorCoefficients {
    /// `vacuum_factor / p_{D|1}`.
    pub decoy: f64,
    /// `vacuum_factor p_{D|0} / (p_{D|1} p_{V|0})`.
    pub vacuum: f64,
    /// `mu_D / (mu_D - mu_V)`; exactly 1 for a true vacuum state.
    pub vacuum_factor: f64,
    /// `(p_Z^A p_Z^B) / (p_X^A p_X^B)`, relating X-basis to Z-basis single-photon rates.
    pub basis_ratio: f64,
}

impl PhaseErrorCoefficients {
    /// Upper bound on `p_1^err` from the decoy and vacuum error probabilities.
    pub fn single_photon_error_bound(&self, p_d_err: f64, p_v_err: f64) -> f64 {
        self.decoy * p_d_err - self.vacuum * p_v_err
    }
}

pub fn phase_error_coefficients(c: &ProtocolConstants) -> Result<PhaseErrorCoefficients> {
    let mu = &c.mu;
    if !(mu.decoy > mu.vacuum && mu.vacuum >= 0.0) {
        return Err(Error::domain("phase-error bound needs mu_D > mu_V >= 0"));
    }
    let px = c.p_basis_alice.x * c.p_basis_bob.x;
    if !(px > 0.0) {
        return Err(Error::domain("phase-error bound needs both parties to use X with positive probability"));
    }
    let d = c.distributions();
    let d1 = d.cond(Intensity::Decoy, 1)?;
    let d0 = d.cond(Intensity::Decoy, 0)?;
    let v0 = d.cond(Intensity::Vacuum, 0)?;
    if !(d1 > 0.0 && v0 > 0.0) {
        return Err(Error::domain("phase-error bound needs p_{D|1} > 0 and p_{V|0} > 0"));
    }
    let vacuum_factor = mu.decoy / (mu.decoy - mu.vacuum);
    Ok(PhaseErrorCoefficients {
        decoy: vacuum_factor / d1,
        vacuum: vacuum_factor * d0 / (d1 * v0),
        vacuum_factor,
        basis_ratio: c.p_basis_alice.z * c.p_basis_bob.z / px,
    })
}

/// How floating-point intermediates are treated.
///
/// The default is conservative. [`Numerics::perturbed`] switches the
/// directed margins off and multiplies every intermediate by an independent
/// factor in `[1 - rel, 1 + rel]`, which is how the rounding audit probes the
/// margins.
#[derive(Debug, Clone)]
pub struct Numerics {
    conservative: bool,
    perturb: Option<(ChaCha8Rng, f64)>,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics { conservative: true, perturb: None }
    }
}

impl Numerics {
    pub fn conservative() -> Self {
        Self::default()
    }

    /// Margins off, no perturbation.
    pub fn plain() -> Self {
        Numerics { conservative: false, perturb: None }
    }

    pub fn perturbed(seed: u64, rel: f64) -> Self {
        Numerics { conservative: false, perturb: Some((stream(seed, StreamRole::Trial, 0), rel)) }
    }

    pub fn is_conservative(&self) -> bool {
        self.conservative
    }

    fn q(&mut self, x: f64) -> f64 {
        match &mut self.perturb {
            Some((rng, rel)) => x * (1.0 + *rel * rng.random_range(-1.0..=1.0)),
            None => x,
        }
    }

    fn kato(&mut self, k: KatoCoefficients) -> KatoCoefficients {
        KatoCoefficients { a: self.q(k.a), b: self.q(k.b), ..k }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct N1zBound {
    pub decoy: DecoyCoefficients,
    pub kato_1z: KatoCoefficients,
    pub kato_s: KatoCoefficients,
    pub kato_d: KatoCoefficients,
    pub kato_v: KatoCoefficients,
    /// `a^{1,Z} <= -sqrt(N)/2`, which forces the bound to zero.
    pub degenerate: bool,
    /// The formula value before margin and clamping.
    pub raw: f64,
    /// After the downward margin, clamped to `[0, N]`.
    pub value: f64,
    pub floor: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NphBound {
    pub coefficients: PhaseErrorCoefficients,
    pub kato_ph: KatoCoefficients,
    pub kato_dx: KatoCoefficients,
    pub kato_vx: KatoCoefficients,
    /// `a'^{ph} >= sqrt(N)/2`, which forces the bound to `N`.
    pub degenerate: bool,
    pub raw: f64,
    /// After the upward margin, clamped to `[0, N]`.
    pub value: f64,
    pub ceil: u64,
}

/// Sum of terms together with the sum of their absolute constituents, used
/// to size the directed margin.
#[derive(Default)]
struct Accum {
    value: f64,
    magnitude: f64,
}

impl Accum {
    fn add(&mut self, value: f64, magnitude: f64) {
        self.value += value;
        self.magnitude += magnitude;
    }
}

pub fn n1z_lower(c: &ProtocolConstants, obs: &Observables, exp: &ExpectedObservables) -> Result<N1zBound> {
    n1z_lower_with(c, obs, exp, &mut Numerics::default())
}

pub fn n1z_lower_with(
    c: &ProtocolConstants,
    obs: &Observables,
    exp: &ExpectedObservables,
    num: &mut Numerics,
) -> Result<N1zBound> {
    let n = c.n() as f64;
    let rn = n.sqrt();
    let eps = c.eps_secrecy * c.eps_secrecy / 32.0;
    let k1 = num.kato(KatoCoefficients::plus(n, exp.n_1z, eps)?);
    let ks = num.kato(KatoCoefficients::plus(n, exp.n_sift_s, eps)?);
    let kv = num.kato(KatoCoefficients::plus(n, exp.n_sift_v, eps)?);
    let kd = num.kato(KatoCoefficients::minus(n, exp.n_sift_d, eps)?);
    let decoy = decoy_coefficients(c)?;
    let lambda = num.q(decoy.lambda);
    let zeta = num.q(decoy.zeta);
    let gamma = num.q(decoy.gamma);

    let mut out = N1zBound {
        decoy,
        kato_1z: k1,
        kato_s: ks,
        kato_d: kd,
        kato_v: kv,
        degenerate: false,
        raw: 0.0,
        value: 0.0,
        floor: 0,
    };
    if k1.a <= -rn / 2.0 {
        out.degenerate = true;
        return Ok(out);
    }

    let upper = |count: u64, k: &KatoCoefficients| {
        let x = count as f64;
        (
            x * (1.0 + 2.0 * k.a / rn) + (k.b - k.a) * rn,
            x * (1.0 + 2.0 * k.a.abs() / rn) + (k.b.abs() + k.a.abs()) * rn,
        )
    };
    let mut acc = Accum::default();
    let (v, m) = upper(obs.n_sift_s, &ks);
    acc.add(num.q(lambda * v), lambda.abs() * m);
    let (v, m) = upper(obs.n_sift_v, &kv);
    acc.add(num.q(gamma * v), gamma.abs() * m);
    let xd = obs.n_sift_d as f64;
    let skew = 2.0 * xd / n - 1.0;
    let v = xd - (kd.b + kd.a * skew) * rn;
    let m = xd + (kd.b.abs() + kd.a.abs() * skew.abs()) * rn;
    acc.add(num.q(zeta * v), zeta.abs() * m);
    acc.add(num.q(-(k1.b - k1.a) * rn), (k1.b.abs() + k1.a.abs()) * rn);

    let den = 1.0 + 2.0 * k1.a / rn;
    let prefactor = num.q(1.0 / den);
    let sensitivity = (1.0 + 2.0 * k1.a.abs() / rn) / den;
    out.raw = num.q(prefactor * acc.value);
    let margin = if num.conservative {
        SLACK * (prefactor.abs() * sensitivity * acc.magnitude + 1.0)
    } else {
        0.0
    };
    out.value = (out.raw - margin).clamp(0.0, n);
    out.floor = out.value.floor() as u64;
    Ok(out)
}

pub fn nph_upper(c: &ProtocolConstants, obs: &Observables, exp: &ExpectedObservables) -> Result<NphBound> {
    nph_upper_with(c, obs, exp, &mut Numerics::default())
}

pub fn nph_upper_with(
    c: &ProtocolConstants,
    obs: &Observables,
    exp: &ExpectedObservables,
    num: &mut Numerics,
) -> Result<NphBound> {
    let n = c.n() as f64;
    let rn = n.sqrt();
    let eps = c.eps_secrecy * c.eps_secrecy / 24.0;
    let kph = num.kato(KatoCoefficients::minus(n, exp.n_ph, eps)?);
    let kdx = num.kato(KatoCoefficients::plus(n, exp.n_err_dx, eps)?);
    let kvx = num.kato(KatoCoefficients::minus(n, exp.n_err_vx, eps)?);
    let coefficients = phase_error_coefficients(c)?;
    let wd = num.q(coefficients.basis_ratio * coefficients.decoy);
    let wv = num.q(coefficients.basis_ratio * coefficients.vacuum);

    let mut out = NphBound {
        coefficients,
        kato_ph: kph,
        kato_dx: kdx,
        kato_vx: kvx,
        degenerate: false,
        raw: n,
        value: n,
        ceil: c.n(),
    };
    if kph.a >= rn / 2.0 {
        out.degenerate = true;
        return Ok(out);
    }

    let mut acc = Accum::default();
    let xd = obs.n_err_dx as f64;
    let v = xd * (1.0 + 2.0 * kdx.a / rn) + (kdx.b - kdx.a) * rn;
    let m = xd * (1.0 + 2.0 * kdx.a.abs() / rn) + (kdx.b.abs() + kdx.a.abs()) * rn;
    acc.add(num.q(wd * v), wd.abs() * m);
    let xv = obs.n_err_vx as f64;
    let skew = 2.0 * xv / n - 1.0;
    let v = xv - (kvx.b + kvx.a * skew) * rn;
    let m = xv + (kvx.b.abs() + kvx.a.abs() * skew.abs()) * rn;
    acc.add(num.q(-wv * v), wv.abs() * m);
    acc.add(num.q((kph.b - kph.a) * rn), (kph.b.abs() + kph.a.abs()) * rn);

    let den = 1.0 - 2.0 * kph.a / rn;
    let prefactor = num.q(1.0 / den);
    let sensitivity = (1.0 + 2.0 * kph.a.abs() / rn) / den;
    out.raw = num.q(prefactor * acc.value);
    let margin = if num.conservative {
        SLACK * (prefactor.abs() * sensitivity * acc.magnitude + 1.0)
    } else {
        0.0
    };
    out.value = (out.raw + margin).clamp(0.0, n);
    out.ceil = out.value.ceil() as u64;
    Ok(out)
}

/// `ceil(-log2(eps_secrecy^2 / 4))`.
pub fn secrecy_overhead(eps_secrecy: f64) -> u64 {
    secrecy_overhead_with(eps_secrecy, &mut Numerics::default())
}

fn secrecy_overhead_with(eps_secrecy: f64, num: &mut Numerics) -> u64 {
    let bits = num.q(-2.0 * eps_secrecy.log2() + 2.0);
    let bits = if num.conservative { bits * (1.0 + SLACK) } else { bits };
    bits.ceil().max(0.0) as u64
}

/// Privacy-amplification amount
/// `N_sift - F + F h(C / F) + ceil(-log2(eps^2 / 4))` for `F = n1z_floor`,
/// `C = nph_ceil`. With `F = 0` the entropy term vanishes.
///
/// `F` is first capped at `N_sift`, since single-photon detections in the Z
/// basis are a subset of the sifted rounds.
pub fn n_pa(c: &ProtocolConstants, obs: &Observables, n1z_floor: u64, nph_ceil: u64) -> u64 {
    n_pa_with(c, obs, n1z_floor, nph_ceil, &mut Numerics::default())
}

pub fn n_pa_with(
    c: &ProtocolConstants,
    obs: &Observables,
    n1z_floor: u64,
    nph_ceil: u64,
    num: &mut Numerics,
) -> u64 {
    let f = n1z_floor.min(obs.n_sift);
    let overhead = secrecy_overhead_with(c.eps_secrecy, num);
    if f == 0 {
        return obs.n_sift + overhead;
    }
    let h = entropy_h(nph_ceil as f64 / f as f64).expect("ratio of counts is nonnegative");
    let h = num.q(h);
    let leak = f as f64 * h;
    let leak = if num.conservative { leak * (1.0 + SLACK) } else { leak };
    let leak = (leak.ceil() as u64).min(f);
    obs.n_sift - f + leak + overhead
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetShare {
    pub event: String,
    pub eps: f64,
}

/// Concentration events of the secrecy budget, four at `eps^2/32` and three at `eps^2/24`.
pub fn budget_trail(eps_secrecy: f64) -> Vec<BudgetShare> {
    let e2 = eps_secrecy * eps_secrecy;
    let mut trail: Vec<BudgetShare> = [
        "single-photon Z detections (lower)",
        "signal sifted detections (upper)",
        "vacuum sifted detections (upper)",
        "decoy sifted detections (lower)",
    ]
    .iter()
    .map(|e| BudgetShare { event: e.to_string(), eps: e2 / 32.0 })
    .collect();
    trail.extend(
        ["phase errors (upper)", "decoy X errors (upper)", "vacuum X errors (lower)"]
            .iter()
            .map(|e| BudgetShare { event: e.to_string(), eps: e2 / 24.0 }),
    );
    trail
}

#[derive(Debug, Clone, Serialize)]
pub struct SecurityResult {
    pub n1z: N1zBound,
    pub nph: NphBound,
    /// `floor` of the conservative lower bound.
    pub n1z_lower: u64,
    /// `ceil` of the conservative upper bound.
    pub nph_upper: u64,
    pub n_sift: u64,
    pub n_ec: u64,
    pub n_pa: u64,
    pub n_verify: u32,
    /// `N_sift - N_PA - N_EC - N_verify`, possibly negative.
    pub n_fin: i64,
    pub abort: bool,
    /// `max(n_fin, 0)`.
    pub key_length: u64,
    pub eps_correct: f64,
    pub eps_secrecy: f64,
    pub eps_total: f64,
    pub budget_trail: Vec<BudgetShare>,
}

pub fn security_result(
    c: &ProtocolConstants,
    obs: &Observables,
    exp: &ExpectedObservables,
    n_ec: u64,
) -> Result<SecurityResult> {
    security_result_with(c, obs, exp, n_ec, &mut Numerics::default())
}

pub fn security_result_with(
    c: &ProtocolConstants,
    obs: &Observables,
    exp: &ExpectedObservables,
    n_ec: u64,
    num: &mut Numerics,
) -> Result<SecurityResult> {
    obs.validate(c.n())?;
    exp.validate(c.n())?;
    let n1z = n1z_lower_with(c, obs, exp, num)?;
    let nph = nph_upper_with(c, obs, exp, num)?;
    let n_pa = n_pa_with(c, obs, n1z.floor, nph.ceil, num);
    let n_fin = obs.n_sift as i64 - n_pa as i64 - n_ec as i64 - c.n_verify as i64;
    let eps_correct = 0.5f64.powi(c.n_verify as i32);
    Ok(SecurityResult {
        n1z_lower: n1z.floor,
        nph_upper: nph.ceil,
        n1z,
        nph,
        n_sift: obs.n_sift,
        n_ec,
        n_pa,
        n_verify: c.n_verify,
        n_fin,
        abort: n_fin <= 0,
        key_length: n_fin.max(0) as u64,
        eps_correct,
        eps_secrecy: c.eps_secrecy,
        eps_total: eps_correct + c.eps_secrecy,
        budget_trail: budget_trail(c.eps_secrecy),
    })
}

/// Expected observables under the honest channel `ch`.
///
/// `n_1z` uses the single-photon click probability
/// `1 - (1 - p_dark)^2 (1 - eta)`, and `n_ph` the single-photon X-basis error
/// probability, both for Z-basis rounds.
pub fn expected_observables(c: &ProtocolConstants, ch: &ChannelModel) -> ExpectedObservables {
    let n = c.n() as f64;
    let zz = c.p_basis_alice.z * c.p_basis_bob.z;
    let xx = c.p_basis_alice.x * c.p_basis_bob.x;
    let sift = |w| {
        n * c.p_intensity[w] * zz * click_probabilities(c, ch, w, Basis::Z, 0, Basis::Z).click()
    };
    let err = |w| {
        let e: f64 = (0..2u8)
            .map(|a| click_probabilities(c, ch, w, Basis::X, a, Basis::X).error_against(a))
            .sum::<f64>()
            / 2.0;
        n * c.p_intensity[w] * xx * e
    };
    let d = c.distributions();
    let p1 = d.total(1);
    let y1 = 1.0 - (1.0 - ch.p_dark).powi(2) * (1.0 - ch.eta());
    let e1: f64 = (0..2u8)
        .map(|a| single_photon_clicks(ch, c.theta.phase(a, Basis::X), Basis::X).error_against(a))
        .sum::<f64>()
        / 2.0;
    ExpectedObservables {
        n_sift_s: sift(Intensity::Signal),
        n_sift_d: sift(Intensity::Decoy),
        n_sift_v: sift(Intensity::Vacuum),
        n_err_dx: err(Intensity::Decoy),
        n_err_vx: err(Intensity::Vacuum),
        n_1z: n * zz * p1 * y1,
        n_ph: n * zz * p1 * e1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::fixtures::reference_constants;
    use crate::params::{PerBasis, PerIntensity};
    use proptest::prelude::*;

    #[test]
    fn plug_in_expectations_follow_the_decoy_combination() {
        let c = reference_constants();
        let ch = ChannelModel::with_loss_db(3.0, 0.5, 0.01, 1e-6).unwrap();
        let exp = expected_observables(&c, &ch);
        let obs = exp.rounded();
        let plug = ExpectedObservables::from_observed(&c, &obs).unwrap();
        let k = decoy_coefficients(&c).unwrap();
        let want = k.lambda * obs.n_sift_s as f64 + k.zeta * obs.n_sift_d as f64 + k.gamma * obs.n_sift_v as f64;
        assert!((plug.n_1z - want).abs() <= 1e-9 * want.abs());
        assert!(plug.n_1z <= exp.n_1z * 1.01 && plug.n_1z > 0.5 * exp.n_1z);
        assert!(plug.n_ph >= 0.0);
        assert_eq!(plug.n_sift_s, obs.n_sift_s as f64);
        security_result(&c, &obs, &plug, 0).unwrap();
        let empty = Observables::new(0, 0, 0, 0, 0);
        let z = ExpectedObservables::from_observed(&c, &empty).unwrap();
        assert_eq!((z.n_1z, z.n_ph), (0.0, 0.0));
    }

    /// Independent transcription of the printed closed form for `a`.
    fn a_reference(s: f64, t: f64, eps: f64, primed: bool) -> f64 {
        let l = eps.ln();
        let sign = if primed { -1.0 } else { 1.0 };
        let bracket = 9.0 * t * (s - t) - 2.0 * s * l;
        let num = sign * 216.0 * s.sqrt() * t * (s - t) * l - sign * 48.0 * s.powf(1.5) * l.powi(2)
            + 27.0 * 2f64.sqrt() * (s - 2.0 * t) * (-(s * s) * l * bracket).sqrt();
        num / (4.0 * (9.0 * s - 8.0 * l) * bracket)
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn kato_a_matches_reference_transcription() {
        let (s, t, eps) = (1e6, 1e4, 1e-6);
        let a1 = kato_a(s, t, eps).unwrap();
        let a2 = kato_a(s, s - t, eps).unwrap();
        assert!(rel(a1, a_reference(s, t, eps, false)) < 1e-12);
        assert!(rel(a2, a_reference(s, s - t, eps, false)) < 1e-12);
        // the (s - 2t) factor flips sign between the two calls
        assert!(a1 > 0.0 && a2 < 0.0);
        assert!(rel(kato_a_prime(s, t, eps).unwrap(), a_reference(s, t, eps, true)) < 1e-12);
    }

    #[test]
    fn kato_radical_vanishes_at_half() {
        let (s, eps) = (1e6, 1e-6);
        let l = f64::ln(eps);
        let t = s / 2.0;
        let bracket = 9.0 * t * (s - t) - 2.0 * s * l;
        let den = 4.0 * (9.0 * s - 8.0 * l) * bracket;
        let two_terms = 216.0 * s.sqrt() * t * (s - t) * l - 48.0 * s.powf(1.5) * l * l;
        assert!(rel(kato_a(s, t, eps).unwrap(), two_terms / den) < 1e-12);
        assert!(rel(kato_a_prime(s, t, eps).unwrap(), -two_terms / den) < 1e-12);
    }

    #[test]
    fn kato_prime_mirrors_unprimed() {
        for &(s, t) in &[(1e4, 30.0), (1e6, 2e5), (1e8, 7e7)] {
            let a = kato_a(s, s - t, 1e-9).unwrap();
            let ap = kato_a_prime(s, t, 1e-9).unwrap();
            assert!((a + ap).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn kato_plug_back_examples() {
        let k = KatoCoefficients::plus(1e6, 1e4, 1e-6).unwrap();
        assert!(rel(k.tail_probability(1e6), 1e-6) < 1e-9);
        let k = KatoCoefficients::minus(1e6, 1e3, 1e-8).unwrap();
        assert!(rel(k.tail_probability(1e6), 1e-8) < 1e-9);
        assert!(k.b >= k.a.abs());
    }

    #[test]
    fn kato_domain_errors() {
        assert!(matches!(kato_a(0.0, 0.0, 0.1), Err(Error::Domain(_))));
        assert!(matches!(kato_a(10.0, 11.0, 0.1), Err(Error::Domain(_))));
        assert!(matches!(kato_a(10.0, 5.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(kato_b_prime(10.0, -1.0, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn kato_optimises_the_deviation() {
        // perturbing a along the constraint surface never shrinks b + a (2t/s - 1)
        let (s, t, eps) = (1e6, 3e4, 1e-8);
        let k = KatoCoefficients::plus(s, t, eps).unwrap();
        let objective = |a: f64| b_from_a(s, a, eps, KatoTail::Plus) + a * (2.0 * t / s - 1.0);
        let best = objective(k.a);
        for da in [-5.0, -0.5, 0.5, 5.0] {
            assert!(objective(k.a + da) >= best - 1e-9);
        }
    }

    proptest! {
        #[test]
        fn kato_pairs_plug_back(log_s in 4.0f64..8.0, frac in 0.01f64..0.99, log_eps in -20.0f64..-2.0) {
            let s = 10f64.powf(log_s);
            let eps = 10f64.powf(log_eps);
            for k in [KatoCoefficients::plus(s, frac * s, eps).unwrap(), KatoCoefficients::minus(s, frac * s, eps).unwrap()] {
                prop_assert!(k.b >= k.a.abs());
                prop_assert!(rel(k.tail_probability(s), eps) < 1e-9);
            }
        }
    }

    #[test]
    fn decoy_sign_structure_and_identity() {
        let c = reference_constants();
        let d = decoy_coefficients(&c).unwrap();
        assert!(d.lambda <= 0.0 && d.zeta >= 0.0 && d.gamma <= 0.0);
        let p1 = c.distributions().total(1);
        let mu = c.mu;
        let want = mu.decoy * (mu.signal - mu.decoy) / mu.signal;
        assert!(rel(d.denominator * p1, want) < 1e-10);
    }

    #[test]
    fn decoy_denominator_with_nonzero_vacuum() {
        let mut c = reference_constants();
        c.mu.vacuum = 1e-3;
        let d = decoy_coefficients(&c).unwrap();
        let p1 = c.distributions().total(1);
        let want = c.mu.decoy * (c.mu.signal - c.mu.decoy) / c.mu.signal - c.mu.vacuum;
        assert!(rel(d.denominator * p1, want) < 1e-10);
    }

    #[test]
    fn decoy_rejects_bad_ordering() {
        let mut c = reference_constants();
        c.mu = PerIntensity::new(0.1, 0.5, 0.0);
        assert!(matches!(decoy_coefficients(&c), Err(Error::Domain(_))));
    }

    #[test]
    fn single_photon_coefficient_of_phase_bound_is_one() {
        for mu_v in [0.0, 1e-3, 0.05] {
            let mut c = reference_constants();
            c.mu.vacuum = mu_v;
            let k = phase_error_coefficients(&c).unwrap();
            let d = c.distributions();
            let coef1 = k.decoy * d.cond(Intensity::Decoy, 1).unwrap()
                - k.vacuum * d.cond(Intensity::Vacuum, 1).unwrap();
            assert!((coef1 - 1.0).abs() < 1e-12, "mu_V={mu_v}: {coef1}");
            let coef0 = k.decoy * d.cond(Intensity::Decoy, 0).unwrap()
                - k.vacuum * d.cond(Intensity::Vacuum, 0).unwrap();
            assert!(coef0.abs() < 1e-12);
        }
    }

    fn honest_run() -> (ProtocolConstants, Observables, ExpectedObservables) {
        let c = ProtocolConstants::new(
            100,
            1_000_000,
            PerIntensity::new(0.7, 0.2, 0.1),
            PerIntensity::new(0.5, 0.1, 0.0),
            PerBasis::new(0.8, 0.2),
            PerBasis::new(0.8, 0.2),
            32,
            0.02,
            1e-10,
        )
        .unwrap();
        let ch = ChannelModel::with_loss_db(10.0, 0.5, 0.01, 1e-6).unwrap();
        let exp = expected_observables(&c, &ch);
        (c, exp.rounded(), exp)
    }

    #[test]
    fn honest_bounds_bracket_expectations() {
        let (c, obs, exp) = honest_run();
        let n1 = n1z_lower(&c, &obs, &exp).unwrap();
        let nph = nph_upper(&c, &obs, &exp).unwrap();
        assert!(!n1.degenerate && !nph.degenerate);
        assert!(n1.value > 0.0 && n1.value < exp.n_1z, "{} vs {}", n1.value, exp.n_1z);
        assert!(nph.value > exp.n_ph);
        assert!(n1.raw - n1.value > 0.0);
        assert!(nph.value - nph.raw > 0.0);
    }

    #[test]
    fn n1z_degenerate_guard() {
        // a^{1,Z} <= -sqrt(N)/2 needs N~1Z within a hair of N at tiny N
        let mut c = reference_constants();
        c.n_block = 1;
        c.m = 4;
        c.n_total = 4;
        let exp = ExpectedObservables {
            n_sift_s: 1.0,
            n_sift_d: 1.0,
            n_sift_v: 0.5,
            n_err_dx: 0.1,
            n_err_vx: 0.1,
            n_1z: 4.0,
            n_ph: 0.1,
        };
        let obs = Observables::new(1, 1, 0, 0, 0);
        let k = KatoCoefficients::plus(4.0, 4.0, c.eps_secrecy.powi(2) / 32.0).unwrap();
        assert!(k.a <= -1.0);
        let b = n1z_lower(&c, &obs, &exp).unwrap();
        assert!(b.degenerate);
        assert_eq!(b.floor, 0);
    }

    #[test]
    fn nph_degenerate_guard() {
        let mut c = reference_constants();
        c.n_block = 1;
        c.m = 4;
        c.n_total = 4;
        let exp = ExpectedObservables {
            n_sift_s: 1.0,
            n_sift_d: 1.0,
            n_sift_v: 0.5,
            n_err_dx: 0.1,
            n_err_vx: 0.1,
            n_1z: 1.0,
            n_ph: 0.0,
        };
        let obs = Observables::new(1, 1, 0, 0, 0);
        let b = nph_upper(&c, &obs, &exp).unwrap();
        assert!(b.degenerate);
        assert_eq!(b.ceil, 4);
    }

    #[test]
    fn zero_counts_give_zero_lower_bound() {
        let c = reference_constants();
        let exp = ExpectedObservables {
            n_sift_s: 1e-3,
            n_sift_d: 1e-3,
            n_sift_v: 1e-3,
            n_err_dx: 1e-3,
            n_err_vx: 1e-3,
            n_1z: 1e-3,
            n_ph: 100.0,
        };
        let obs = Observables::default();
        let b = n1z_lower(&c, &obs, &exp).unwrap();
        assert!(b.raw <= 0.0);
        assert_eq!(b.floor, 0);
        let p = nph_upper(&c, &obs, &exp).unwrap();
        assert!(p.value > 0.0 && p.value < 1e3, "{}", p.value);
    }

    #[test]
    fn secrecy_overhead_at_1e_minus_10() {
        assert_eq!(secrecy_overhead(1e-10), 69);
        // -log2(2.5e-21) from the definition
        assert!((-(2.5e-21f64).log2() - 68.438).abs() < 1e-3);
    }

    #[test]
    fn n_pa_examples() {
        let mut c = reference_constants();
        c.eps_secrecy = 1e-10;
        let obs = Observables::new(1_000_000, 0, 0, 0, 0);
        let h = entropy_h(0.05).unwrap();
        let want = 1_000_000 - 400_000 + (400_000.0 * h).ceil() as u64 + 69;
        assert_eq!(n_pa(&c, &obs, 400_000, 20_000), want);
        assert_eq!(n_pa(&c, &obs, 400_000, 200_000), 1_000_000 + 69);
        assert_eq!(n_pa(&c, &obs, 400_000, 300_000), 1_000_000 + 69);
        assert_eq!(n_pa(&c, &obs, 0, 5), 1_000_000 + 69);
    }

    #[test]
    fn n_pa_monotonicity() {
        let c = reference_constants();
        let obs = Observables::new(500_000, 100_000, 1_000, 10, 10);
        for cph in [0u64, 10, 1_000, 50_000, 200_000] {
            let mut prev = u64::MAX;
            for f in (0..=600_000).step_by(7_919) {
                let v = n_pa(&c, &obs, f, cph);
                assert!(v <= prev, "F={f} C={cph}");
                prev = v;
            }
        }
        for f in [1u64, 1_000, 300_000] {
            let mut prev = 0;
            for cph in (0..=400_000).step_by(3_001) {
                let v = n_pa(&c, &obs, f, cph);
                assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn security_result_accounting() {
        let (mut c, obs, exp) = honest_run();
        c.n_verify = 50;
        let r = security_result(&c, &obs, &exp, 1_000).unwrap();
        assert_eq!(r.eps_correct, 2f64.powi(-50));
        assert_eq!(r.eps_total, r.eps_correct + r.eps_secrecy);
        let total: f64 = r.budget_trail.iter().map(|b| b.eps).sum();
        assert!(rel(total, c.eps_secrecy.powi(2) / 4.0) < 1e-12);
        assert_eq!(r.n_fin, obs.n_sift as i64 - r.n_pa as i64 - 1_000 - 50);
        assert!(!r.abort && r.key_length as i64 == r.n_fin);
        assert!(r.n_fin <= r.n_sift as i64);

        let r = security_result(&c, &obs, &exp, obs.n_sift).unwrap();
        assert!(r.abort);
        assert_eq!(r.key_length, 0);
    }

    #[test]
    fn perturbations_never_exceed_conservative_n_pa() {
        let (c, obs, exp) = honest_run();
        let reference = security_result(&c, &obs, &exp, 0).unwrap().n_pa;
        for seed in 0..200 {
            let mut num = Numerics::perturbed(seed, 1e-9);
            let p = security_result_with(&c, &obs, &exp, 0, &mut num).unwrap().n_pa;
            assert!(p <= reference, "seed {seed}: {p} > {reference}");
        }
    }

    #[test]
    fn expected_noiseless_channel_has_no_errors() {
        let c = reference_constants();
        let ch = ChannelModel::with_transmittance(1.0, 1.0, 0.0, 0.0).unwrap();
        let e = expected_observables(&c, &ch);
        assert!(e.n_err_dx < 1e-20);
        assert_eq!(e.n_err_vx, 0.0);
        assert!(e.n_ph < 1e-20);
        assert_eq!(e.n_sift_v, 0.0);
    }

    #[test]
    fn expected_vacuum_counts_are_dark_only() {
        let c = reference_constants();
        let d = 1e-4;
        let ch = ChannelModel::with_loss_db(5.0, 0.3, 0.01, d).unwrap();
        let e = expected_observables(&c, &ch);
        let want = c.n() as f64 * 0.2 * 0.25 * (1.0 - (1.0 - d) * (1.0 - d));
        assert!(rel(e.n_sift_v, want) < 1e-12);
    }
}
