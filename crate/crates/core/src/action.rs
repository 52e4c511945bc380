//! The ACTION block: a temporal channel shift followed by three parallel
//! excitation paths whose attention maps are applied residually and summed.
//!
//! * STE (spatio-temporal): channel mean, 3x3x3 convolution, sigmoid; one
//!   map per pixel and frame.
//! * CE (channel): spatial mean, squeeze to `C/r`, temporal 1D convolution,
//!   expand to `C`, sigmoid; one weight per channel and frame.
//! * ME (motion): squeeze to `C/r`, difference between the convolved next
//!   frame and the current one (the last frame gets zeros), spatial mean,
//!   expand to `C`, sigmoid.
//!
//! Each map `M` excites the shifted input `X` as `X + X * M`.

use crate::autograd::{ChannelShift, Var};
use crate::error::{Error, Result};
use crate::params::{join, Init, ParamSpec, Scope};
use crate::tensor::{ConvSpec, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ActionConfig {
    pub channels: usize,
    pub segments: usize,
    pub reduce_ratio: usize,
    /// Fraction of channels shifted in each temporal direction.
    pub shift_fraction: f64,
}

impl ActionConfig {
    pub fn new(channels: usize, segments: usize) -> Self {
        ActionConfig {
            channels,
            segments,
            reduce_ratio: 16,
            shift_fraction: 0.125,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduce_ratio == 0 {
            return Err(Error::config("reduce ratio must be >= 1"));
        }
        if !self.channels.is_multiple_of(self.reduce_ratio) {
            return Err(Error::config(format!(
                "channels {} not divisible by reduce ratio {}",
                self.channels, self.reduce_ratio
            )));
        }
        if !(0.0..=0.5).contains(&self.shift_fraction) {
            return Err(Error::config(format!("shift fraction {} outside [0, 0.5]", self.shift_fraction)));
        }
        if self.shift_fraction > 0.0 && self.shift_channels() == 0 {
            return Err(Error::config(format!(
                "shift fraction {} moves no channel out of {}",
                self.shift_fraction, self.channels
            )));
        }
        Ok(())
    }

    pub fn reduced(&self) -> usize {
        self.channels / self.reduce_ratio
    }

    pub fn shift_channels(&self) -> usize {
        shift_fold(self.channels, self.shift_fraction)
    }

    /// Learnable tensors of one block, names relative to the block prefix.
    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let (c, cr) = (self.channels, self.reduced());
        let p = |n: &str, shape: &[usize], init| ParamSpec::new(join(prefix, n), shape, init);
        vec![
            p("ste.w", &[1, 1, 3, 3, 3], Init::FanIn(27)),
            p("ste.b", &[1], Init::Zeros),
            p("ce.squeeze.w", &[cr, c], Init::FanIn(c)),
            p("ce.squeeze.b", &[cr], Init::Zeros),
            p("ce.temporal.w", &[cr, cr, 3], Init::FanIn(3 * cr)),
            p("ce.temporal.b", &[cr], Init::Zeros),
            p("ce.expand.w", &[c, cr], Init::FanIn(cr)),
            p("ce.expand.b", &[c], Init::Zeros),
            p("me.squeeze.w", &[cr, c, 1, 1], Init::FanIn(c)),
            p("me.squeeze.b", &[cr], Init::Zeros),
            p("me.k.w", &[cr, cr, 3, 3], Init::FanIn(9 * cr)),
            p("me.k.b", &[cr], Init::Zeros),
            p("me.expand.w", &[c, cr], Init::FanIn(cr)),
            p("me.expand.b", &[c], Init::Zeros),
        ]
    }
}

fn shift_fold(channels: usize, fraction: f64) -> usize {
    (channels as f64 * fraction + 1e-9).floor() as usize
}

/// Shift the first `floor(C * fraction)` channels one frame forward in time,
/// the next block one frame backward, zero-filling vacated frames.
pub fn temporal_shift<'t, F: Scalar>(x: &Var<'t, F>, fraction: f64) -> Result<Var<'t, F>> {
    let shape = x.shape();
    if shape.len() != 5 {
        return Err(Error::shape("temporal_shift", format!("expected (N,T,C,H,W), got {shape:?}")));
    }
    let (t, c) = (shape[1], shape[2]);
    let fold = shift_fold(c, fraction);
    if fold == 0 {
        return Ok(*x);
    }
    if t < 2 {
        log::warn!("temporal_shift with T={t}: nothing to exchange, passing input through");
        return Ok(*x);
    }
    if 2 * fold > c {
        return Err(Error::config(format!("shift fraction {fraction} moves more than all {c} channels")));
    }
    x.shift_time(&[
        ChannelShift {
            lo: 0,
            hi: fold,
            offset: 1,
        },
        ChannelShift {
            lo: fold,
            hi: 2 * fold,
            offset: -1,
        },
    ])
}

fn dims5<F: Scalar>(x: &Var<'_, F>, op: &'static str) -> Result<[usize; 5]> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::shape(op, format!("expected (N,T,C,H,W), got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

/// Spatio-temporal map, `(N, T, 1, H, W)`.
pub fn ste_forward<'t, F: Scalar>(x: &Var<'t, F>, p: &Scope<'_, 't, F>) -> Result<Var<'t, F>> {
    let [n, t, _, h, w] = dims5(x, "ste")?;
    x.avg_pool_channel()?
        .reshape(&[n, 1, t, h, w])?
        .conv3d(&p.get("ste.w")?, &p.get("ste.b")?)?
        .reshape(&[n, t, 1, h, w])
        .map(|v| v.sigmoid())
}

/// Channel map, `(N, T, C, 1, 1)`.
pub fn ce_forward<'t, F: Scalar>(x: &Var<'t, F>, p: &Scope<'_, 't, F>) -> Result<Var<'t, F>> {
    let [n, t, c, _, _] = dims5(x, "ce")?;
    let sq = p.get("ce.squeeze.w")?;
    let cr = sq.shape()[0];
    if cr == 0 || c % cr != 0 {
        return Err(Error::config(format!("channel excitation: {c} channels cannot squeeze to {cr}")));
    }
    let squeezed = x
        .avg_pool_spatial()?
        .reshape(&[n * t, c])?
        .fully_connected(&sq, Some(&p.get("ce.squeeze.b")?))?;
    let temporal = squeezed
        .reshape(&[n, t, cr])?
        .permute(&[0, 2, 1])?
        .conv1d_temporal(&p.get("ce.temporal.w")?, Some(&p.get("ce.temporal.b")?))?
        .permute(&[0, 2, 1])?
        .reshape(&[n * t, cr])?;
    temporal
        .fully_connected(&p.get("ce.expand.w")?, Some(&p.get("ce.expand.b")?))?
        .sigmoid()
        .reshape(&[n, t, c, 1, 1])
}

/// Motion feature: `K * f[t+1] - f[t]` for `t < T-1`, zeros for the last frame.
pub fn motion_diff<'t, F: Scalar>(f: &Var<'t, F>, k_w: &Var<'t, F>, k_b: Option<&Var<'t, F>>) -> Result<Var<'t, F>> {
    let [n, t, c, h, w] = dims5(f, "motion_diff")?;
    if t < 1 {
        return Err(Error::shape("motion_diff", "axis T must be at least 1"));
    }
    let next = f.shift_time(&[ChannelShift {
        lo: 0,
        hi: c,
        offset: -1,
    }])?;
    let spec = ConvSpec::new(c, c, 3, 1, 1);
    let conv = next
        .reshape(&[n * t, c, h, w])?
        .conv2d(k_w, k_b, &spec)?
        .reshape(&[n, t, c, h, w])?;
    let diff = conv.sub(f)?;
    let plane = c * h * w;
    let mask = Tensor::from_fn(&[n, t, c, h, w], |i| {
        if (i / plane) % t == t - 1 {
            F::zero()
        } else {
            F::one()
        }
    });
    diff.mul(&f.tape_constant(mask))
}

/// Motion map, `(N, T, C, 1, 1)`.
pub fn me_forward<'t, F: Scalar>(x: &Var<'t, F>, p: &Scope<'_, 't, F>) -> Result<Var<'t, F>> {
    let [n, t, c, h, w] = dims5(x, "me")?;
    let sq = p.get("me.squeeze.w")?;
    let cr = sq.shape()[0];
    if cr == 0 || c % cr != 0 {
        return Err(Error::config(format!("motion excitation: {c} channels cannot squeeze to {cr}")));
    }
    let squeezed = x
        .reshape(&[n * t, c, h, w])?
        .conv2d(&sq, Some(&p.get("me.squeeze.b")?), &ConvSpec::new(c, cr, 1, 1, 0))?
        .reshape(&[n, t, cr, h, w])?;
    motion_diff(&squeezed, &p.get("me.k.w")?, Some(&p.get("me.k.b")?))?
        .reshape(&[n * t, cr, h, w])?
        .avg_pool_spatial()?
        .reshape(&[n * t, cr])?
        .fully_connected(&p.get("me.expand.w")?, Some(&p.get("me.expand.b")?))?
        .sigmoid()
        .reshape(&[n, t, c, 1, 1])
}

/// The three attention maps of one block.
pub struct ExcitationMaps<'t, F: Scalar> {
    pub ste: Var<'t, F>,
    pub ce: Var<'t, F>,
    pub me: Var<'t, F>,
}

/// Full block. `override_maps` replaces every attention map with a
/// constant (test hook for the fusion rule).
pub fn action_forward<'t, F: Scalar>(
    x: &Var<'t, F>,
    p: &Scope<'_, 't, F>,
    cfg: &ActionConfig,
    override_maps: Option<F>,
) -> Result<Var<'t, F>> {
    let [n, t, c, h, w] = dims5(x, "action")?;
    if c != cfg.channels {
        return Err(Error::shape(
            "action",
            format!("axis C: input has {c} channels, block expects {}", cfg.channels),
        ));
    }
    let shifted = temporal_shift(x, cfg.shift_fraction)?;
    let maps = match override_maps {
        Some(v) => ExcitationMaps {
            ste: shifted.tape_constant(Tensor::full(&[n, t, 1, h, w], v)),
            ce: shifted.tape_constant(Tensor::full(&[n, t, c, 1, 1], v)),
            me: shifted.tape_constant(Tensor::full(&[n, t, c, 1, 1], v)),
        },
        None => excitation_maps(&shifted, p)?,
    };
    let mut out: Option<Var<'t, F>> = None;
    for m in [maps.ste, maps.ce, maps.me] {
        let excited = shifted.add(&shifted.mul_broadcast(&m)?)?;
        out = Some(match out {
            None => excited,
            Some(acc) => acc.add(&excited)?,
        });
    }
    Ok(out.expect("three branches"))
}

/// Attention maps computed from an already shifted input.
pub fn excitation_maps<'t, F: Scalar>(shifted: &Var<'t, F>, p: &Scope<'_, 't, F>) -> Result<ExcitationMaps<'t, F>> {
    Ok(ExcitationMaps {
        ste: ste_forward(shifted, p)?,
        ce: ce_forward(shifted, p)?,
        me: me_forward(shifted, p)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::Parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn config_validation() {
        assert!(ActionConfig::new(32, 8).validate().is_ok());
        assert!(ActionConfig::new(24, 8).validate().is_err());
        let mut c = ActionConfig::new(4, 8);
        c.reduce_ratio = 2;
        // floor(4 / 8) = 0 channels shifted
        assert!(c.validate().is_err());
        c.shift_fraction = 0.0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn shift_fraction_zero_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(rand_input(&[1, 3, 8, 2, 2], 1));
        assert_eq!(temporal_shift(&x, 0.0).unwrap().value(), x.value());
    }

    #[test]
    fn shift_moves_first_fold_forward() {
        let tape = Tape::<f64>::new();
        let xv = rand_input(&[1, 2, 8, 2, 2], 2);
        let x = tape.constant(xv.clone());
        let y = temporal_shift(&x, 0.125).unwrap().value();
        let at = |t: &Tensor<f64>, ti: usize, c: usize, i: usize| t.data()[(ti * 8 + c) * 4 + i];
        for i in 0..4 {
            assert_eq!(at(&y, 1, 0, i), at(&xv, 0, 0, i));
            assert_eq!(at(&y, 0, 0, i), 0.0);
            assert_eq!(at(&y, 0, 1, i), at(&xv, 1, 1, i));
            assert_eq!(at(&y, 1, 1, i), 0.0);
            for c in 2..8 {
                assert_eq!(at(&y, 0, c, i), at(&xv, 0, c, i));
                assert_eq!(at(&y, 1, c, i), at(&xv, 1, c, i));
            }
        }
    }

    #[test]
    fn single_frame_shift_passes_through() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(rand_input(&[2, 1, 8, 2, 2], 3));
        assert_eq!(temporal_shift(&x, 0.125).unwrap().value(), x.value());
    }

    fn zero_block(cfg: &ActionConfig) -> Parameters<f64> {
        let mut p = Parameters::new();
        for s in cfg.param_specs("a") {
            p.insert(&s.name, Tensor::zeros(&s.shape)).unwrap();
        }
        p
    }

    #[test]
    fn zero_weights_give_half_maps() {
        let cfg = ActionConfig {
            reduce_ratio: 4,
            ..ActionConfig::new(8, 3)
        };
        let params = zero_block(&cfg);
        let tape = Tape::<f64>::new();
        let b = params.bind(&tape, false);
        let x = tape.constant(rand_input(&[2, 3, 8, 4, 5], 4));
        let maps = excitation_maps(&x, &b.scope("a")).unwrap();
        assert_eq!(maps.ste.shape(), vec![2, 3, 1, 4, 5]);
        assert_eq!(maps.ce.shape(), vec![2, 3, 8, 1, 1]);
        assert_eq!(maps.me.shape(), vec![2, 3, 8, 1, 1]);
        for m in [maps.ste, maps.ce, maps.me] {
            assert!(m.value().data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn ce_map_ignores_spatial_permutation() {
        let cfg = ActionConfig {
            reduce_ratio: 2,
            ..ActionConfig::new(4, 3)
        };
        let params = Parameters::<f64>::from_specs(&cfg.param_specs("a"), 9).unwrap();
        let tape = Tape::<f64>::new();
        let b = params.bind(&tape, false);
        let xv = rand_input(&[1, 3, 4, 3, 3], 5);
        // reverse pixel order inside each plane
        let mut flipped = xv.clone();
        for plane in flipped.data_mut().chunks_mut(9) {
            plane.reverse();
        }
        let a = ce_forward(&tape.constant(xv), &b.scope("a")).unwrap().value();
        let c = ce_forward(&tape.constant(flipped), &b.scope("a")).unwrap().value();
        for (u, v) in a.data().iter().zip(c.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn motion_of_static_clip_is_zero() {
        let tape = Tape::<f64>::new();
        let frame = rand_input(&[1, 1, 3, 4, 4], 6);
        let clip = Tensor::from_fn(&[1, 4, 3, 4, 4], |i| frame.data()[i % 48]);
        let mut k = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let out = motion_diff(&tape.constant(clip), &tape.constant(k), None).unwrap().value();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forced_maps_scale_shifted_input() {
        let cfg = ActionConfig {
            reduce_ratio: 4,
            ..ActionConfig::new(8, 2)
        };
        let params = zero_block(&cfg);
        let tape = Tape::<f64>::new();
        let b = params.bind(&tape, false);
        let x = tape.constant(rand_input(&[1, 2, 8, 3, 3], 7));
        let xs = temporal_shift(&x, cfg.shift_fraction).unwrap().value();
        for (v, k) in [(0.0, 3.0), (1.0, 6.0)] {
            let y = action_forward(&x, &b.scope("a"), &cfg, Some(v)).unwrap().value();
            assert_eq!(y.shape(), x.shape().as_slice());
            for (a, s) in y.data().iter().zip(xs.data()) {
                assert!((a - k * s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let cfg = ActionConfig {
            reduce_ratio: 4,
            ..ActionConfig::new(8, 2)
        };
        let params = zero_block(&cfg);
        let tape = Tape::<f64>::new();
        let b = params.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 3, 3]));
        let err = action_forward(&x, &b.scope("a"), &cfg, None).unwrap_err().to_string();
        assert!(err.contains("axis C"), "{err}");
    }
}
