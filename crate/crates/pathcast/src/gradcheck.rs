//! Central finite differences against candle's reverse-mode gradients.

use candle_core::{backprop::GradStore, DType, Tensor, Var};

use crate::error::Result;

fn values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

/// Gradient of each variable, zeros where the graph never reached it.
pub fn analytic(grads: &GradStore, vars: &[Var]) -> Result<Vec<Vec<f64>>> {
    vars.iter()
        .map(|v| match grads.get(v.as_tensor()) {
            Some(g) => values(g),
            None => Ok(vec![0.0; v.elem_count()]),
        })
        .collect()
}

/// Central differences of `f` with respect to every element of `vars`.
/// Each variable is restored before moving on.
pub fn central_differences<F>(vars: &[Var], eps: f64, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut() -> Result<f64>,
{
    let mut out = Vec::with_capacity(vars.len());
    for var in vars {
        let base = values(var.as_tensor())?;
        let shape = var.dims().to_vec();
        let dtype = var.dtype();
        let set = |data: Vec<f64>| -> Result<()> {
            let t = Tensor::from_vec(data, shape.as_slice(), var.device())?.to_dtype(dtype)?;
            var.set(&t)?;
            Ok(())
        };
        let mut g = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            set(p)?;
            let up = f()?;
            let mut m = base.clone();
            m[i] -= eps;
            set(m)?;
            let down = f()?;
            g.push((up - down) / (2.0 * eps));
        }
        set(base)?;
        out.push(g);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all entries; zero when both vanish.
pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let flat = |x: &[Vec<f64>]| x.iter().flatten().copied().collect::<Vec<f64>>();
    let (a, b) = (flat(a), flat(b));
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let scale = norm(&a).max(norm(&b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn all_zero(g: &[Vec<f64>]) -> bool {
    g.iter().flatten().all(|&v| v == 0.0)
}
