//! Sinusoidal positional encoding of relative voxel displacements, with
//! the amplitude law that shrinks the whole vector as the displacement
//! grows: `γ_amp(d) = exp(−‖d/l_vox‖₁) · γ(d)`.

/// Encoding configuration. `channels` must be divisible by 6 (a sin/cos
/// pair per frequency, per axis).
#[derive(Clone, Copy, Debug)]
pub struct AmpPeConfig {
    pub channels: usize,
    pub base: f64,
    pub l_vox: f64,
}

impl AmpPeConfig {
    pub fn new(channels: usize, l_vox: f64) -> Self {
        assert!(channels % 6 == 0, "PE channels must be divisible by 6");
        assert!(channels >= 6);
        assert!(l_vox > 0.0);
        Self {
            channels,
            base: 10000.0,
            l_vox,
        }
    }
}

/// Which positional encoding the relocalization tokens carry. `Plain` and
/// `None` exist as test-harness toggles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PeMode {
    #[default]
    Amplified,
    Plain,
    None,
}

/// Unamplified sinusoidal encoding. Each axis contributes C/3 channels:
/// interleaved `sin(pos/ω_j), cos(pos/ω_j)` over C/6 frequencies
/// `ω_j = base^(6j/C)`, with `pos` the displacement in cell units.
pub fn plain_pe(d: [f64; 3], cfg: &AmpPeConfig) -> Vec<f64> {
    let pairs = cfg.channels / 6;
    let mut out = Vec::with_capacity(cfg.channels);
    for axis in 0..3 {
        let pos = d[axis] / cfg.l_vox;
        for j in 0..pairs {
            let omega = cfg.base.powf(6.0 * j as f64 / cfg.channels as f64);
            out.push((pos / omega).sin());
            out.push((pos / omega).cos());
        }
    }
    out
}

/// Amplified encoding: the plain vector scaled by `exp(−‖d/l_vox‖₁)`.
/// Nearby relocations keep full-strength high-frequency channels; distant
/// neighbors fade.
pub fn amplified_pe(d: [f64; 3], cfg: &AmpPeConfig) -> Vec<f64> {
    let l1 = (d[0].abs() + d[1].abs() + d[2].abs()) / cfg.l_vox;
    let amp = (-l1).exp();
    plain_pe(d, cfg).into_iter().map(|v| v * amp).collect()
}
