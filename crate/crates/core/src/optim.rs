//! Adam and 0/1 Adam.
//!
//! 0/1 Adam runs plain Adam (with dense gradient averaging across workers)
//! until `freeze_step`, snapshots the second moment, and from then on only
//! exchanges the first moment, compressed to one sign bit per element plus a
//! scale, with error feedback on both the worker and the server side.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::parallel::comm::{self, Collective, Message, Payload, Phase, SignBits, Tag};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps.is_finite()
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid Adam hyperparameters {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }
}

/// Checks that `grads` covers exactly the keys of `params` with matching
/// shapes and finite values.
fn check_grads(params: &BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
    for name in grads.keys() {
        if !params.contains_key(name) {
            return Err(Error::UnknownParameter(name.clone()));
        }
    }
    for (name, p) in params {
        let g = grads.get(name).ok_or_else(|| Error::Optimizer {
            param: name.clone(),
            message: "missing gradient".into(),
        })?;
        if g.shape() != p.shape() {
            return Err(Error::Optimizer {
                param: name.clone(),
                message: format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                ),
            });
        }
        if !g.is_finite() {
            return Err(Error::Optimizer {
                param: name.clone(),
                message: "non-finite gradient".into(),
            });
        }
    }
    Ok(())
}

fn check_state(state: &BTreeMap<String, Tensor>, params: &BTreeMap<String, Tensor>) -> Result<()> {
    if state.len() != params.len() {
        return Err(Error::Optimizer {
            param: String::new(),
            message: format!(
                "optimizer tracks {} tensors, got {}",
                state.len(),
                params.len()
            ),
        });
    }
    for (name, p) in params {
        match state.get(name) {
            Some(s) if s.shape() == p.shape() => {}
            _ => {
                return Err(Error::Optimizer {
                    param: name.clone(),
                    message: "parameter not registered with the optimizer".into(),
                })
            }
        }
    }
    Ok(())
}

/// One bias-corrected Adam step, in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
) -> Result<()> {
    check_grads(params, grads)?;
    check_state(&state.m, params)?;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powf(state.step as f64);
    let bc2 = 1.0 - beta2.powf(state.step as f64);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Result of [`compress_1bit`].
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub signs: SignBits,
    pub scale: f64,
    pub residual: Tensor,
}

impl Compressed {
    /// `scale · sign(c)` as a tensor.
    pub fn transmitted(&self, shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), self.signs.scaled(self.scale))
            .expect("sign count matches shape")
    }
}

/// One-bit compression with error feedback: `c = u + residual`, scale
/// `mean|c|` rounded to FP32 precision, transmitted `scale · sign(c)` with
/// `sign(0) = +1`, new residual `c − transmitted`.
///
/// The scale is kept to 24 significant bits so that `c − transmitted` is
/// computed without rounding whenever the values in `c` span a moderate
/// dynamic range; the error-feedback identity then holds exactly.
pub fn compress_1bit(u: &Tensor, residual: &Tensor) -> Result<Compressed> {
    let c = u.add(residual)?;
    let n = c.numel();
    let scale = if n == 0 {
        0.0
    } else {
        let mean = c.data().iter().map(|x| x.abs()).sum::<f64>() / n as f64;
        mean as f32 as f64
    };
    let signs = SignBits::from_values(c.data());
    let transmitted = signs.scaled(scale);
    let mut r = c;
    for (x, t) in r.data_mut().iter_mut().zip(&transmitted) {
        *x -= t;
    }
    Ok(Compressed {
        signs,
        scale,
        residual: r,
    })
}

/// Flattens a parameter map into one vector in key order.
pub fn flatten(map: &BTreeMap<String, Tensor>) -> Tensor {
    let data: Vec<f64> = map
        .values()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Tensor::vector(&data)
}

/// Inverse of [`flatten`], using `like` for names and shapes.
pub fn unflatten(
    flat: &Tensor,
    like: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>> {
    let total: usize = like.values().map(Tensor::numel).sum();
    if flat.numel() != total {
        return Err(Error::dim("unflatten", flat.shape(), &[total]));
    }
    let mut out = BTreeMap::new();
    let mut at = 0;
    for (name, t) in like {
        let n = t.numel();
        out.insert(
            name.clone(),
            Tensor::new(t.shape().to_vec(), flat.data()[at..at + n].to_vec())?,
        );
        at += n;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroOneAdamState {
    pub adam: AdamState,
    pub phase: Phase,
    /// Second-moment snapshot taken at the end of step `freeze_step`,
    /// flattened in parameter-name order. Empty during warmup.
    pub v_frozen: Tensor,
    pub residual_local: Tensor,
    pub residual_server: Tensor,
    /// `None` never freezes.
    pub freeze_step: Option<u64>,
    /// Bits this worker has sent over all steps.
    pub bits_transmitted: u64,
    /// Bits sent during the most recent step.
    pub last_step_bits: u64,
}

/// Default freeze point: a quarter of the run, at least one step.
pub fn default_freeze_step(total_steps: u64) -> u64 {
    (total_steps / 4).max(1)
}

impl ZeroOneAdamState {
    pub fn new(
        config: AdamConfig,
        params: &BTreeMap<String, Tensor>,
        freeze_step: Option<u64>,
    ) -> Result<Self> {
        if freeze_step == Some(0) {
            return Err(Error::Config(
                "freeze_step must be at least 1 (the variance needs a warmup)".into(),
            ));
        }
        let n: usize = params.values().map(Tensor::numel).sum();
        Ok(Self {
            adam: AdamState::new(config, params)?,
            phase: Phase::Warmup,
            v_frozen: Tensor::vector(&[]),
            residual_local: Tensor::zeros(&[n]),
            residual_server: Tensor::zeros(&[n]),
            freeze_step,
            bits_transmitted: 0,
            last_step_bits: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    fn phase_for(&self, step: u64) -> Phase {
        match self.freeze_step {
            Some(f) if step > f => Phase::Frozen,
            _ => Phase::Warmup,
        }
    }
}

/// One 0/1 Adam step. `grads` are this worker's local gradients and
/// `weight` its share of the global batch; every worker in `comm` must call
/// this with the same step counter.
pub fn zero_one_adam_step(
    state: &mut ZeroOneAdamState,
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    comm: &mut dyn Collective,
    weight: f64,
) -> Result<()> {
    let step = state.adam.step + 1;
    let tag = Tag {
        step,
        phase: state.phase_for(step),
    };
    if let Err(e) = check_grads(params, grads).and_then(|_| check_state(&state.adam.m, params)) {
        comm.abort(tag, &e.to_string());
        return Err(e);
    }

    match tag.phase {
        Phase::Warmup => {
            let local = flatten(grads);
            let msg = Message {
                tag,
                weight,
                payload: Payload::Dense(local.clone()),
            };
            state.last_step_bits = msg.payload.bits();
            let msgs = comm.all_gather(msg)?;
            comm::check_messages(tag, &msgs)?;
            let avg = comm::weighted_mean(&msgs, local.shape())?;
            let avg = unflatten(&avg, grads)?;
            adam_step(&mut state.adam, params, &avg)?;
            if state.freeze_step == Some(step) {
                state.v_frozen = flatten(&state.adam.v);
                state.phase = Phase::Frozen;
            }
        }
        Phase::Frozen => {
            let AdamConfig {
                lr,
                beta1,
                beta2,
                eps,
            } = state.adam.config;
            state.adam.step = step;
            let g = flatten(grads);
            let mut m = flatten(&state.adam.m);
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }

            let local = compress_1bit(&m, &state.residual_local)?;
            state.residual_local = local.residual;
            let msg = Message {
                tag,
                weight,
                payload: Payload::Compressed {
                    signs: local.signs,
                    scale: local.scale,
                },
            };
            state.last_step_bits = msg.payload.bits();
            let msgs = comm.all_gather(msg)?;
            comm::check_messages(tag, &msgs)?;
            let avg = comm::weighted_mean(&msgs, m.shape())?;

            // every worker runs the server compression on identical inputs
            let server = compress_1bit(&avg, &state.residual_server)?;
            state.residual_server = server.residual.clone();
            let m = server.transmitted(m.shape());

            let bc1 = 1.0 - beta1.powf(step as f64);
            let bc2 =
                1.0 - beta2.powf(state.freeze_step.expect("frozen phase has a freeze step") as f64);
            let mut flat_p = flatten(params);
            for ((w, mi), vi) in flat_p
                .data_mut()
                .iter_mut()
                .zip(m.data())
                .zip(state.v_frozen.data())
            {
                *w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
            *params = unflatten(&flat_p, params)?;
            state.adam.m = unflatten(&m, params)?;
        }
    }
    state.bits_transmitted += state.last_step_bits;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::comm::LocalComm;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::vector(&[v]))])
    }

    #[test]
    fn scalar_step_by_hand() {
        let mut p = one("w", 1.0);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &p).unwrap();
        adam_step(&mut st, &mut p, &one("w", 1.0)).unwrap();
        // m̂ = v̂ = 1
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert_eq!(p["w"].data()[0], expected);
        assert!((p["w"].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_grad_keeps_params() {
        let mut p = one("w", 0.25);
        let mut st = AdamState::new(AdamConfig::default(), &p).unwrap();
        adam_step(&mut st, &mut p, &one("w", 0.0)).unwrap();
        assert_eq!(p["w"].data(), &[0.25]);
    }

    #[test]
    fn non_finite_grad_names_param() {
        let mut p = one("layers.0.q", 0.0);
        let mut st = AdamState::new(AdamConfig::default(), &p).unwrap();
        let err = adam_step(&mut st, &mut p, &one("layers.0.q", f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::Optimizer { ref param, .. } if param == "layers.0.q"));
    }

    #[test]
    fn compress_by_hand() {
        let u = Tensor::vector(&[0.5, -0.2]);
        let c = compress_1bit(&u, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(c.scale, 0.35f32 as f64);
        assert!((c.scale - 0.35).abs() < 1e-8);
        assert_eq!(c.transmitted(&[2]).data(), &[c.scale, -c.scale]);
        assert!((c.residual.data()[0] - 0.15).abs() < 1e-8);
        assert!((c.residual.data()[1] - 0.15).abs() < 1e-8);

        let z = compress_1bit(&Tensor::zeros(&[3]), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(z.scale, 0.0);
        assert_eq!(z.residual.data(), &[0.0; 3]);
    }

    #[test]
    fn frozen_step_single_worker_trace() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = BTreeMap::from([("w".to_string(), Tensor::vector(&[1.0, 1.0]))]);
        let mut st = ZeroOneAdamState::new(cfg, &p, Some(1)).unwrap();
        let g = BTreeMap::from([("w".to_string(), Tensor::vector(&[1.0, -0.5]))]);

        zero_one_adam_step(&mut st, &mut p, &g, &mut LocalComm, 1.0).unwrap();
        assert_eq!(st.phase, Phase::Frozen);
        assert_eq!(st.last_step_bits, 128);
        let v = st.v_frozen.data().to_vec();
        let after_warmup = p["w"].data().to_vec();

        zero_one_adam_step(&mut st, &mut p, &g, &mut LocalComm, 1.0).unwrap();
        assert_eq!(st.last_step_bits, 2 + 64);
        assert_eq!(st.v_frozen.data(), &v[..]);

        // oracle: m = β1·m₁ + (1−β1)·g with m₁ = (1−β1)·g;
        // local scale = mean|m|, server re-compresses the same vector
        let b: f64 = 1.0 - 0.9;
        let m = [0.9 * (b * 1.0) + b * 1.0, 0.9 * (b * -0.5) + b * -0.5];
        let s = ((m[0].abs() + m[1].abs()) / 2.0) as f32 as f64;
        let sent = [s, -s];
        let bc1 = 1.0 - 0.9f64.powi(2);
        let bc2 = 1.0 - 0.999;
        for i in 0..2 {
            let expected = after_warmup[i] - 0.1 * (sent[i] / bc1) / ((v[i] / bc2).sqrt() + 1e-8);
            assert_eq!(p["w"].data()[i], expected);
        }
    }

    #[test]
    fn freeze_zero_rejected() {
        let p = one("w", 0.0);
        assert!(ZeroOneAdamState::new(AdamConfig::default(), &p, Some(0)).is_err());
    }
}
