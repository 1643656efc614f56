//! Forward fiber-link simulator.
//!
//! Units: β₂ in ps²/km, γ in 1/(W·km), α in dB/km, lengths in km, DGD in ps and
//! angular frequency in rad/ps. The linear operator of a segment of length `z` is
//! `H(ω) = exp(−j·(β₂/2)·ω²·z)` and the Kerr rotation is `u·exp(+j·γ·L_eff·P)`.

use crate::error::{arg, Result};
use crate::fft;
use crate::rng::keyed_rng;
use crate::signal::ComplexSignal;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::ops::Mul;

/// Planck constant (J·s).
const PLANCK: f64 = 6.626_070_15e-34;
/// Optical carrier frequency used for the ASE noise level (Hz).
pub const CARRIER_HZ: f64 = 193.4e12;
/// Manakov coupling factor for dual-polarization nonlinearity.
pub const MANAKOV: f64 = 8.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberParams {
    pub beta2: f64,
    pub gamma: f64,
    pub alpha_db: f64,
    pub span_length: f64,
    pub n_spans: usize,
}

impl Default for FiberParams {
    /// Standard single-mode fiber, 25 × 80 km.
    fn default() -> Self {
        Self {
            beta2: -21.7,
            gamma: 1.3,
            alpha_db: 0.2,
            span_length: 80.0,
            n_spans: 25,
        }
    }
}

impl FiberParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.span_length > 0.0) || self.n_spans < 1 || !(self.alpha_db >= 0.0) {
            return arg(format!("invalid fiber parameters: {self:?}"));
        }
        if !(self.beta2.is_finite() && self.gamma.is_finite()) {
            return arg("fiber coefficients must be finite");
        }
        Ok(())
    }

    /// Power attenuation coefficient in 1/km.
    pub fn alpha_lin(&self) -> f64 {
        self.alpha_db * std::f64::consts::LN_10 / 10.0
    }

    /// Effective nonlinear length `(1 − e^{−αz})/α` of a segment (km).
    pub fn l_eff(&self, z: f64) -> f64 {
        effective_length(self.alpha_lin(), z)
    }

    pub fn total_length(&self) -> f64 {
        self.span_length * self.n_spans as f64
    }

    /// Effective length of the link interval `[a, b]` (km from the
    /// transmitter), weighting every point by its power relative to launch.
    pub fn segment_l_eff(&self, a: f64, b: f64) -> f64 {
        let l = self.span_length;
        let mut total = 0.0;
        let mut x = a;
        while x < b - 1e-12 * l {
            let span_start = (x / l + 1e-12).floor() * l;
            let end = b.min(span_start + l);
            let off = (x - span_start).max(0.0);
            total += (-self.alpha_lin() * off).exp() * self.l_eff(end - x);
            x = end;
        }
        total
    }

    /// Effective length of backward step `k` (0 = next to the receiver) of
    /// `n_steps` equal steps over the whole link.
    pub fn backward_step_l_eff(&self, n_steps: usize, k: usize) -> f64 {
        let t = self.total_length();
        let z = t / n_steps as f64;
        self.segment_l_eff(t - (k + 1) as f64 * z, t - k as f64 * z)
    }

    /// Power loss of one span, as a linear factor ≥ 1.
    pub fn span_loss(&self) -> f64 {
        (self.alpha_lin() * self.span_length).exp()
    }
}

pub fn effective_length(alpha_lin: f64, z: f64) -> f64 {
    if alpha_lin == 0.0 {
        z
    } else {
        -(-alpha_lin * z).exp_m1() / alpha_lin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// All-pass chromatic-dispersion response at angular frequency `omega` (rad/ps).
#[inline]
pub fn cd_response(beta2: f64, z: f64, omega: f64, direction: Direction) -> Complex64 {
    let phi = 0.5 * beta2 * omega * omega * z;
    match direction {
        Direction::Forward => Complex64::from_polar(1.0, -phi),
        Direction::Backward => Complex64::from_polar(1.0, phi),
    }
}

/// Applies accumulated dispersion over `z` km (or removes it, for `Backward`).
pub fn cd_operator(sig: &ComplexSignal, beta2: f64, z: f64, direction: Direction) -> ComplexSignal {
    if beta2 == 0.0 || z == 0.0 {
        return sig.clone();
    }
    let omegas = sig.grid.omega_bins();
    sig.map_pols(|p| fft::filter_freq(p, |k| cd_response(beta2, z, omegas[k], direction)))
}

/// Per-sample nonlinear power: `|u_x|²` for one polarization, Manakov-weighted
/// `(8/9)(|u_x|² + |u_y|²)` for two.
pub fn nonlinear_power(pols: &[&[Complex64]], n: usize) -> f64 {
    match pols {
        [x] => x[n].norm_sqr(),
        [x, y] => MANAKOV * (x[n].norm_sqr() + y[n].norm_sqr()),
        _ => unreachable!("one or two polarizations"),
    }
}

/// Kerr phase rotation `u ← u·exp(j·γ·l_eff·P)`.
pub fn kerr_step(sig: &ComplexSignal, gamma: f64, l_eff: f64) -> ComplexSignal {
    let mut out = sig.clone();
    kerr_in_place(&mut out, gamma * l_eff);
    out
}

pub(crate) fn kerr_in_place(sig: &mut ComplexSignal, phase_per_watt: f64) {
    if phase_per_watt == 0.0 {
        return;
    }
    let n = sig.len();
    let dual = sig.is_dual();
    for i in 0..n {
        let p = if dual {
            MANAKOV * (sig.pol_x[i].norm_sqr() + sig.pol_y.as_ref().unwrap()[i].norm_sqr())
        } else {
            sig.pol_x[i].norm_sqr()
        };
        let rot = Complex64::from_polar(1.0, phase_per_watt * p);
        for pol in sig.pols_mut() {
            pol[i] *= rot;
        }
    }
}

/// 2×2 complex Jones matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jones(pub [[Complex64; 2]; 2]);

impl Jones {
    pub fn identity() -> Self {
        let o = Complex64::new(1.0, 0.0);
        let z = Complex64::new(0.0, 0.0);
        Jones([[o, z], [z, o]])
    }

    pub fn diag(a: Complex64, b: Complex64) -> Self {
        let z = Complex64::new(0.0, 0.0);
        Jones([[a, z], [z, b]])
    }

    pub fn det(&self) -> Complex64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn adjoint(&self) -> Self {
        let m = &self.0;
        Jones([
            [m[0][0].conj(), m[1][0].conj()],
            [m[0][1].conj(), m[1][1].conj()],
        ])
    }

    /// Largest entry-wise deviation of `M·Mᴴ` from the identity.
    pub fn unitarity_error(&self) -> f64 {
        let p = *self * self.adjoint();
        let i = Jones::identity();
        let mut e: f64 = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                e = e.max((p.0[r][c] - i.0[r][c]).norm());
            }
        }
        e
    }

    #[inline]
    pub fn apply(&self, x: Complex64, y: Complex64) -> (Complex64, Complex64) {
        let m = &self.0;
        (m[0][0] * x + m[0][1] * y, m[1][0] * x + m[1][1] * y)
    }

    /// Haar-distributed element of SU(2) from a uniform point on the 3-sphere.
    pub fn random_su2<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut q = [0.0f64; 4];
        loop {
            for v in q.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-9 {
                for v in q.iter_mut() {
                    *v /= n;
                }
                break;
            }
        }
        let a = Complex64::new(q[0], q[1]);
        let b = Complex64::new(q[2], q[3]);
        Jones([[a, b], [-b.conj(), a.conj()]])
    }
}

impl Mul for Jones {
    type Output = Jones;
    fn mul(self, rhs: Jones) -> Jones {
        let a = &self.0;
        let b = &rhs.0;
        let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
        }
        Jones(out)
    }
}

/// First-order PMD matrix `diag(e^{−jωτ/2}, e^{+jωτ/2})`.
pub fn dgd_jones(tau: f64, omega: f64) -> Jones {
    let h = 0.5 * omega * tau;
    Jones::diag(Complex64::from_polar(1.0, -h), Complex64::from_polar(1.0, h))
}

/// One birefringent section: DGD element followed by a rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmdSection {
    pub rotation: Jones,
    pub dgd_tau: f64,
}

impl PmdSection {
    pub fn new(rotation: Jones, dgd_tau: f64) -> Result<Self> {
        if rotation.unitarity_error() > 1e-12 || (rotation.det() - 1.0).norm() > 1e-12 {
            return arg("PMD rotation must be unitary with determinant 1");
        }
        Ok(Self { rotation, dgd_tau })
    }

    /// `R·J(ω)` of this section.
    pub fn matrix(&self, omega: f64) -> Jones {
        self.rotation * dgd_jones(self.dgd_tau, omega)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmdLink {
    pub sections: Vec<PmdSection>,
    pub mean_dgd: f64,
    pub seed: u64,
}

impl PmdLink {
    /// Composite response `(R_M J_M(ω)) ··· (R_1 J_1(ω))`; section 1 acts first.
    pub fn matrix(&self, omega: f64) -> Jones {
        self.sections
            .iter()
            .fold(Jones::identity(), |acc, s| s.matrix(omega) * acc)
    }

    /// Applies the whole link in the frequency domain.
    pub fn apply(&self, sig: &ComplexSignal) -> Result<ComplexSignal> {
        apply_jones_freq(sig, |w| self.matrix(w))
    }
}

/// Draws `m_sections` sections with deterministic DGD `mean_dgd/√M` and
/// Haar-random rotations.
pub fn draw_pmd_link(seed: u64, m_sections: usize, mean_dgd: f64) -> Result<PmdLink> {
    if m_sections < 1 {
        return arg("a PMD link needs at least one section");
    }
    let mut rng = keyed_rng(seed, &[0x504d44]);
    let tau = mean_dgd / (m_sections as f64).sqrt();
    let sections = (0..m_sections)
        .map(|_| PmdSection {
            rotation: Jones::random_su2(&mut rng),
            dgd_tau: tau,
        })
        .collect();
    Ok(PmdLink {
        sections,
        mean_dgd,
        seed,
    })
}

fn apply_jones_freq<F>(sig: &ComplexSignal, matrix: F) -> Result<ComplexSignal>
where
    F: Fn(f64) -> Jones,
{
    let Some(py) = sig.pol_y.as_ref() else {
        return arg("PMD needs a dual-polarization signal");
    };
    let omegas = sig.grid.omega_bins();
    let mut x = fft::fft(&sig.pol_x);
    let mut y = fft::fft(py);
    for k in 0..x.len() {
        let (a, b) = matrix(omegas[k]).apply(x[k], y[k]);
        x[k] = a;
        y[k] = b;
    }
    fft::ifft_in_place(&mut x);
    fft::ifft_in_place(&mut y);
    ComplexSignal::dual(sig.grid, x, y)
}

/// Applies `R·J(ω)` of one section per frequency bin.
pub fn pmd_section_apply(sig: &ComplexSignal, section: &PmdSection) -> Result<ComplexSignal> {
    apply_jones_freq(sig, |w| section.matrix(w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplifierConfig {
    /// Gain in dB; `None` compensates the span loss exactly.
    pub gain_db: Option<f64>,
    pub noise_figure_db: f64,
    pub noise_enabled: bool,
    pub seed: u64,
}

impl Default for AmplifierConfig {
    fn default() -> Self {
        Self {
            gain_db: None,
            noise_figure_db: 5.0,
            noise_enabled: false,
            seed: 0,
        }
    }
}

impl AmplifierConfig {
    pub fn noiseless() -> Self {
        Self::default()
    }

    fn power_gain(&self, fiber: &FiberParams) -> Result<f64> {
        match self.gain_db {
            Some(g) if g < 0.0 => arg("amplifier gain must be >= 0 dB"),
            Some(g) => Ok(10f64.powf(g / 10.0)),
            None => Ok(fiber.span_loss()),
        }
    }

    /// ASE power spectral density per polarization (W/Hz) for power gain `g`.
    pub fn ase_psd(&self, g: f64) -> f64 {
        (g - 1.0) * PLANCK * CARRIER_HZ * 10f64.powf(self.noise_figure_db / 10.0) / 2.0
    }
}

/// Symmetric split-step solution of the NLSE over an amplified multi-span link.
///
/// Each step is half-dispersion, (PMD), Kerr rotation, half-dispersion; the two
/// half-dispersion operators of neighbouring steps are merged into one
/// frequency-domain multiplication together with the PMD sections and the
/// attenuation. `frame_key` separates the noise streams of different frames.
pub fn propagate(
    tx: &ComplexSignal,
    fiber: &FiberParams,
    pmd: Option<&PmdLink>,
    amp: &AmplifierConfig,
    steps_per_span: usize,
    frame_key: u64,
) -> Result<ComplexSignal> {
    fiber.validate()?;
    if steps_per_span < 1 {
        return arg("steps per span must be >= 1");
    }
    if pmd.is_some() && !tx.is_dual() {
        return arg("PMD emulation needs a dual-polarization signal");
    }
    let gain = amp.power_gain(fiber)?;
    let h = fiber.span_length / steps_per_span as f64;
    let alpha = fiber.alpha_lin();
    let total_steps = fiber.n_spans * steps_per_span;
    // Kerr phase per watt of midpoint power over one step
    let nl = fiber.gamma * effective_length(alpha, h) * (alpha * h / 2.0).exp();
    let omegas = tx.grid.omega_bins();
    let half: Vec<Complex64> = omegas
        .iter()
        .map(|&w| cd_response(fiber.beta2, h / 2.0, w, Direction::Forward) * (-alpha * h / 4.0).exp())
        .collect();
    let full: Vec<Complex64> = half.iter().map(|v| v * v).collect();

    // section i sits in the middle of global step floor(i·T/M)
    let section_at = |step: usize| -> Vec<&PmdSection> {
        match pmd {
            None => vec![],
            Some(link) => {
                let m = link.sections.len();
                link.sections
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i * total_steps / m == step)
                    .map(|(_, s)| s)
                    .collect()
            }
        }
    };

    let mut sig = tx.clone();
    let mut step = 0;
    for span in 0..fiber.n_spans {
        for s in 0..steps_per_span {
            let lin = if s == 0 { &half } else { &full };
            let sections = section_at(step);
            linear_step(&mut sig, lin, &sections, &omegas);
            kerr_in_place(&mut sig, nl);
            step += 1;
        }
        linear_step(&mut sig, &half, &[], &omegas);
        sig.scale(gain.sqrt());
        if amp.noise_enabled {
            let var = amp.ase_psd(gain) * sig.grid.sample_rate();
            let sd = (var / 2.0).sqrt();
            let mut rng = keyed_rng(amp.seed, &[frame_key, span as u64]);
            for pol in sig.pols_mut() {
                for v in pol.iter_mut() {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    *v += Complex64::new(re * sd, im * sd);
                }
            }
        }
    }
    Ok(sig)
}

fn linear_step(sig: &mut ComplexSignal, lin: &[Complex64], sections: &[&PmdSection], omegas: &[f64]) {
    if sections.is_empty() {
        for pol in sig.pols_mut() {
            fft::fft_in_place(pol);
            for (v, h) in pol.iter_mut().zip(lin) {
                *v *= h;
            }
            fft::ifft_in_place(pol);
        }
        return;
    }
    let mut x = std::mem::take(&mut sig.pol_x);
    let mut y = sig.pol_y.take().expect("dual polarization checked by caller");
    fft::fft_in_place(&mut x);
    fft::fft_in_place(&mut y);
    for k in 0..x.len() {
        let (mut a, mut b) = (x[k] * lin[k], y[k] * lin[k]);
        for s in sections {
            (a, b) = s.matrix(omegas[k]).apply(a, b);
        }
        x[k] = a;
        y[k] = b;
    }
    fft::ifft_in_place(&mut x);
    fft::ifft_in_place(&mut y);
    sig.pol_x = x;
    sig.pol_y = Some(y);
}

/// Adds white circular gaussian noise of total complex variance `var` per sample.
pub fn add_awgn<R: Rng + ?Sized>(sig: &mut ComplexSignal, var: f64, rng: &mut R) {
    let sd = (var / 2.0).sqrt();
    for pol in sig.pols_mut() {
        for v in pol.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *v += Complex64::new(re * sd, im * sd);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{qam_map, rrc_taps, shape_periodic, SamplingGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_signal(n: usize, dual: bool, seed: u64) -> ComplexSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = SamplingGrid::new(20e9, n, 2).unwrap();
        let mut draw = || -> Vec<Complex64> {
            (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect()
        };
        let x = draw();
        if dual {
            let y = draw();
            ComplexSignal::dual(g, x, y).unwrap()
        } else {
            ComplexSignal::single(g, x).unwrap()
        }
    }

    fn rel_err(a: &ComplexSignal, b: &ComplexSignal) -> f64 {
        let num: f64 = a
            .pols()
            .flatten()
            .zip(b.pols().flatten())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum();
        (num / b.energy()).sqrt()
    }

    #[test]
    fn segment_effective_length_matches_quadrature() {
        let f = FiberParams {
            beta2: -21.7,
            gamma: 1.3,
            alpha_db: 0.2,
            span_length: 80.0,
            n_spans: 3,
        };
        let power = |x: f64| (-f.alpha_lin() * (x % 80.0)).exp();
        for (a, b) in [(0.0, 80.0), (20.0, 40.0), (70.0, 170.0), (0.0, 240.0), (95.0, 96.0)] {
            let n = 200_000;
            let h = (b - a) / n as f64;
            let quad: f64 = (0..n).map(|i| power(a + (i as f64 + 0.5) * h) * h).sum();
            assert!((f.segment_l_eff(a, b) - quad).abs() < 1e-6, "{a} {b}");
        }
        assert!((f.segment_l_eff(0.0, 80.0) - f.l_eff(80.0)).abs() < 1e-12);
        let per_step: f64 = (0..12).map(|k| f.backward_step_l_eff(12, k)).sum();
        assert!((per_step - 3.0 * f.l_eff(80.0)).abs() < 1e-9);
        // the step next to the receiver undoes the weak end of the last span
        assert!(f.backward_step_l_eff(12, 0) < f.backward_step_l_eff(12, 3));
    }

    #[test]
    fn cd_identity_cases() {
        let s = random_signal(64, false, 1);
        assert_eq!(cd_operator(&s, 0.0, 80.0, Direction::Forward), s);
        assert_eq!(cd_operator(&s, -21.7, 0.0, Direction::Forward), s);
    }

    #[test]
    fn cd_single_tone_phase() {
        // 5 GHz tone on a 160 GS/s, 32-sample grid lands exactly on bin 1
        let n = 32;
        let g = SamplingGrid::new(160e9, n, 1).unwrap();
        let x: Vec<Complex64> = (0..n)
            .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / n as f64))
            .collect();
        let s = ComplexSignal::single(g, x.clone()).unwrap();
        let out = cd_operator(&s, -21.7, 80.0, Direction::Forward);
        let w = 2.0 * PI * 5e9 * 1e-12;
        let phi = 0.5 * -21.7 * w * w * 80.0;
        assert!((phi - (-0.857)).abs() < 1e-3);
        for (o, i) in out.pol_x.iter().zip(&x) {
            assert!((o - i * Complex64::from_polar(1.0, -phi)).norm() < 1e-12);
        }
    }

    #[test]
    fn cd_is_unitary_and_invertible() {
        let s = random_signal(256, true, 2);
        let f = cd_operator(&s, -21.7, 2000.0, Direction::Forward);
        assert!((f.energy() / s.energy() - 1.0).abs() < 1e-12);
        let b = cd_operator(&f, -21.7, 2000.0, Direction::Backward);
        assert!(rel_err(&b, &s) < 1e-10);
    }

    #[test]
    fn kerr_cases() {
        let s = random_signal(128, true, 3);
        assert_eq!(kerr_step(&s, 0.0, 10.0), s);
        let out = kerr_step(&s, 1.3, 17.0);
        for (a, b) in out.pols().flatten().zip(s.pols().flatten()) {
            assert!((a.norm() - b.norm()).abs() < 1e-15);
        }
        let g = SamplingGrid::new(1e9, 1, 1).unwrap();
        let one = ComplexSignal::single(g, vec![Complex64::new(1.0, 0.0)]).unwrap();
        let r = kerr_step(&one, PI, 1.0);
        assert!((r.pol_x[0] - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn dgd_jones_cases() {
        assert_eq!(dgd_jones(0.0, 3.0), Jones::identity());
        let m = dgd_jones(1.0, PI);
        assert!((m.0[0][0] - Complex64::new(0.0, -1.0)).norm() < 1e-15);
        assert!((m.0[1][1] - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let m = dgd_jones(rng.gen_range(-50.0..50.0), rng.gen_range(-1.0..1.0));
            assert!((m.det() - 1.0).norm() < 1e-15);
            assert!(m.unitarity_error() < 1e-15);
        }
    }

    #[test]
    fn pmd_section_integer_delay() {
        let s = random_signal(64, true, 5);
        let dt = s.grid.dt_ps();
        let id = PmdSection::new(Jones::identity(), 0.0).unwrap();
        assert!(rel_err(&pmd_section_apply(&s, &id).unwrap(), &s) < 1e-14);
        let sec = PmdSection::new(Jones::identity(), 2.0 * dt).unwrap();
        let out = pmd_section_apply(&s, &sec).unwrap();
        let n = s.len();
        let py = s.pol_y.as_ref().unwrap();
        for k in 0..n {
            assert!((out.pol_x[k] - s.pol_x[(k + n - 1) % n]).norm() < 1e-12);
            assert!((out.pol_y.as_ref().unwrap()[k] - py[(k + 1) % n]).norm() < 1e-12);
        }
        assert!(pmd_section_apply(&random_signal(8, false, 1), &id).is_err());
    }

    #[test]
    fn pmd_section_preserves_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_signal(128, true, 6);
        for _ in 0..10 {
            let sec = PmdSection::new(Jones::random_su2(&mut rng), rng.gen_range(0.0..200.0)).unwrap();
            let out = pmd_section_apply(&s, &sec).unwrap();
            assert!((out.energy() / s.energy() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pmd_link_draws() {
        let l = draw_pmd_link(1, 1, 0.0).unwrap();
        assert_eq!(l.sections.len(), 1);
        assert_eq!(l.sections[0].dgd_tau, 0.0);
        assert_eq!(draw_pmd_link(9, 4, 3.0).unwrap(), draw_pmd_link(9, 4, 3.0).unwrap());
        assert!(draw_pmd_link(1, 0, 1.0).is_err());
        let link = draw_pmd_link(7, 16, 10.0).unwrap();
        for s in &link.sections {
            assert!((s.dgd_tau - 2.5).abs() < 1e-15);
            assert!(s.rotation.unitarity_error() < 1e-12);
            assert!((s.rotation.det() - 1.0).norm() < 1e-12);
        }
        for k in 0..64 {
            let w = (k as f64 - 32.0) * 0.01;
            let m = link.matrix(w);
            assert!(m.unitarity_error() < 1e-12);
            assert!((m.det() - 1.0).norm() < 1e-12);
        }
    }

    fn qam_frame(n_sym: usize, sps: usize, dual: bool, seed: u64) -> ComplexSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps = rrc_taps(0.1, 32, sps).unwrap();
        let mut pols = vec![];
        for _ in 0..(1 + dual as usize) {
            let idx: Vec<usize> = (0..n_sym).map(|_| rng.gen_range(0..16)).collect();
            let f = qam_map(&idx, 16).unwrap();
            let s = shape_periodic(&f, sps, &taps, 10e9).unwrap();
            pols.push(s.pol_x);
        }
        ComplexSignal::from_pols(SamplingGrid::for_symbols(10e9, n_sym, sps).unwrap(), pols).unwrap()
    }

    #[test]
    fn linear_regime_matches_single_cd_filter() {
        let fiber = FiberParams {
            gamma: 0.0,
            alpha_db: 0.0,
            ..FiberParams::default()
        };
        let tx = qam_frame(256, 8, false, 1);
        let out = propagate(&tx, &fiber, None, &AmplifierConfig::noiseless(), 50, 0).unwrap();
        let oracle = cd_operator(&tx, fiber.beta2, fiber.total_length(), Direction::Forward);
        assert!(rel_err(&out, &oracle) < 1e-9);
    }

    #[test]
    fn zero_input_zero_output() {
        let g = SamplingGrid::new(80e9, 512, 8).unwrap();
        let tx = ComplexSignal::zeros(g, true);
        let out = propagate(&tx, &FiberParams::default(), None, &AmplifierConfig::noiseless(), 4, 0).unwrap();
        assert!(out.energy() == 0.0);
        assert!(propagate(&tx, &FiberParams::default(), None, &AmplifierConfig::noiseless(), 0, 0).is_err());
    }

    #[test]
    fn amplifier_restores_span_loss() {
        let fiber = FiberParams {
            gamma: 0.0,
            n_spans: 3,
            ..FiberParams::default()
        };
        let tx = qam_frame(128, 8, false, 2);
        let out = propagate(&tx, &fiber, None, &AmplifierConfig::noiseless(), 5, 0).unwrap();
        assert!((out.energy() / tx.energy() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn step_size_self_convergence() {
        let fiber = FiberParams::default();
        let mut tx = qam_frame(512, 8, false, 3);
        // 4 dBm launch power
        let p = 10f64.powf(0.4) * 1e-3;
        let s = (p / tx.mean_power()).sqrt();
        tx.scale(s);
        let a = propagate(&tx, &fiber, None, &AmplifierConfig::noiseless(), 50, 0).unwrap();
        let b = propagate(&tx, &fiber, None, &AmplifierConfig::noiseless(), 100, 0).unwrap();
        let rel_db = 20.0 * rel_err(&a, &b).log10();
        assert!(rel_db < -35.0, "{rel_db} dB");
    }

    #[test]
    fn noise_is_keyed_and_has_expected_level() {
        let fiber = FiberParams {
            gamma: 0.0,
            n_spans: 2,
            ..FiberParams::default()
        };
        let g = SamplingGrid::new(80e9, 8192, 8).unwrap();
        let tx = ComplexSignal::zeros(g, false);
        let amp = AmplifierConfig {
            noise_enabled: true,
            seed: 11,
            ..AmplifierConfig::default()
        };
        let a = propagate(&tx, &fiber, None, &amp, 2, 0).unwrap();
        let b = propagate(&tx, &fiber, None, &amp, 2, 0).unwrap();
        let c = propagate(&tx, &fiber, None, &amp, 2, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // first span's noise is attenuated and re-amplified by the second span (lossless net)
        let gain = fiber.span_loss();
        let want = 2.0 * amp.ase_psd(gain) * g.sample_rate();
        let got = a.mean_power();
        assert!((got / want - 1.0).abs() < 0.05, "{got} vs {want}");
    }

    #[test]
    fn propagate_with_pmd_preserves_energy_linear() {
        let fiber = FiberParams {
            gamma: 0.0,
            alpha_db: 0.0,
            n_spans: 2,
            ..FiberParams::default()
        };
        let tx = qam_frame(128, 8, true, 4);
        let link = draw_pmd_link(3, 6, 20.0).unwrap();
        let out = propagate(&tx, &fiber, Some(&link), &AmplifierConfig::noiseless(), 4, 0).unwrap();
        assert!((out.energy() / tx.energy() - 1.0).abs() < 1e-12);
        // with no dispersion, the distributed link equals the lumped composite
        let no_cd = FiberParams { beta2: 0.0, ..fiber };
        let out = propagate(&tx, &no_cd, Some(&link), &AmplifierConfig::noiseless(), 4, 0).unwrap();
        let lumped = link.apply(&tx).unwrap();
        assert!(rel_err(&out, &lumped) < 1e-12);
    }
}
