use super::{Real, Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|)` over all coordinates.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

fn eval_scalar(f: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if let Some(op) = tape.first_non_finite() {
        return Err(TensorError::NonFinite { op: op.into() });
    }
    if tape.value(out).numel() != 1 {
        return Err(TensorError::Contract("gradient check needs a scalar function".into()));
    }
    Ok(tape.value(out).data()[0])
}

/// Checks the gradient of a scalar function of several inputs, in 64-bit.
pub fn gradient_check_many(
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<GradCheck> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(TensorError::Contract(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if let Some(op) = tape.first_non_finite() {
        return Err(TensorError::NonFinite { op: op.into() });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut probe = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (i, &ga) in grads.iter().enumerate() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + h;
            let up = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig - h;
            let down = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((ga - numeric).abs() / ga.abs().max(1.0));
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coordinates,
    })
}

/// Single-input form of [`gradient_check_many`].
pub fn gradient_check(f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>, x: &Tensor<f64>, h: f64) -> Result<GradCheck> {
    gradient_check_many(|tape, v| f(tape, v[0]), std::slice::from_ref(x), h)
}

impl<F: Real> Tensor<F> {
    /// Deterministic pseudo-random fill in `[-scale, scale)`; test helper
    /// that needs no RNG plumbing.
    pub fn hashed(shape: &[usize], seed: u64, scale: f64) -> Self {
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        Tensor::from_fn(shape, |_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            F::from_f64((2.0 * u - 1.0) * scale)
        })
    }
}
