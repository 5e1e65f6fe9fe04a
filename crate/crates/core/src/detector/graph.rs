//! The per-trajectory objective recorded on a tape for exact gradients.

use super::{names, DetectorModel, LossBreakdown};
use crate::embedding::TrajectoryEmbeddings;
use crate::error::{MascError, Result};
use crate::numerics::{Gradients, ParamVars, Tape, Var};

/// Loss value, parameter gradients, and the adjoint of the refreshed prototype.
#[derive(Debug, Clone)]
pub struct GradientResult {
    pub loss: LossBreakdown,
    pub grads: Gradients,
    /// `∂L/∂p'` where `p'` is the attention output that the prototype term
    /// is measured against.
    pub prototype_grad: Vec<f64>,
}

/// Reverse-mode gradients of `L_recon + λ·L_proto` for one trajectory.
pub fn loss_gradients(model: &DetectorModel, emb: &TrajectoryEmbeddings, lambda: f64) -> Result<GradientResult> {
    if !(lambda >= 0.0) {
        return Err(MascError::precondition("lambda must be non-negative"));
    }
    model.check_inputs(emb)?;
    let n = emb.steps.len();
    if n == 0 {
        return Err(MascError::precondition("empty trajectory"));
    }
    let params = model.params();
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);

    let states: Vec<Var> = match model.mixer() {
        Some(mixer) => {
            let (wq, bq) = (vars.get(names::F_Q_W)?, vars.vector(names::F_Q_B)?);
            let (wh, bh) = (vars.get(names::F_H_W)?, vars.vector(names::F_H_B)?);
            let q = tape.constant(emb.query.as_slice().to_vec());
            let mut seq = Vec::with_capacity(n);
            seq.push(tape.affine_map(wq, bq, q));
            for h in &emb.steps[..n - 1] {
                let hv = tape.constant(h.as_slice().to_vec());
                seq.push(tape.affine_map(wh, bh, hv));
            }
            mixer.forward_tape(&mut tape, &seq)
        }
        None => emb.context_states[..n].iter().map(|s| tape.constant(s.clone())).collect(),
    };

    let (wt, bt) = (vars.get(names::F_THETA_W)?, vars.vector(names::F_THETA_B)?);
    let x_hats: Vec<Var> = states.iter().map(|&s| tape.affine_map(wt, bt, s)).collect();

    // Prototype refresh: softmax((p Wq)(X̂ Wk)^T / √d) (X̂ Wv).
    let p = vars.vector(names::PROTO)?;
    let (w_q, w_k, w_v) = (vars.get(names::W_Q)?, vars.get(names::W_K)?, vars.get(names::W_V)?);
    let qp = tape.vecmat(p, w_q);
    let inv_scale = 1.0 / (model.d() as f64).sqrt();
    let logits: Vec<Var> = x_hats
        .iter()
        .map(|&x| {
            let k = tape.vecmat(x, w_k);
            let s = tape.dot(qp, k);
            tape.scale(s, inv_scale)
        })
        .collect();
    let logit_vec = tape.concat(&logits);
    let weights = tape.softmax(logit_vec);
    let weighted: Vec<Var> = x_hats
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let v = tape.vecmat(x, w_v);
            let w = tape.index(weights, i);
            tape.mul_scalar(v, w)
        })
        .collect();
    let p_new = tape.sum(&weighted);

    let mut recon_terms = Vec::with_capacity(n);
    let mut proto_terms = Vec::with_capacity(n);
    for (&x_hat, h) in x_hats.iter().zip(&emb.steps) {
        let target = tape.constant(h.as_slice().to_vec());
        recon_terms.push(tape.sq_dist(x_hat, target));
        let c = tape.cosine(x_hat, p_new);
        proto_terms.push(tape.affine(c, -1.0, 1.0));
    }
    let recon = tape.mean(&recon_terms);
    let proto = tape.mean(&proto_terms);
    let weighted_proto = tape.scale(proto, lambda);
    let total = tape.add(recon, weighted_proto);

    let loss = LossBreakdown {
        recon: tape.scalar(recon),
        proto: tape.scalar(proto),
        total: tape.scalar(total),
        prototype: tape.value(p_new).to_vec(),
    };
    if !loss.total.is_finite() {
        return Err(MascError::Diverged(format!("non-finite loss {}", loss.total)));
    }
    let adj = tape.backward(total);
    let grads = vars.collect(params, &adj);
    if !grads.all_finite() {
        return Err(MascError::Diverged("non-finite gradient".into()));
    }
    let prototype_grad = adj.get(p_new).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; model.d()]);
    Ok(GradientResult { loss, grads, prototype_grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BackboneSpec;
    use crate::embedding::{embed_trajectory, HashingEmbedder};
    use crate::numerics::{finite_diff, max_relative_error};
    use crate::trace::{Step, Trajectory};

    #[test]
    fn tape_loss_matches_plain_loss_and_finite_differences() {
        let m = DetectorModel::new(3, 5, BackboneSpec::frozen_mixer(4, 2, 2), 5).unwrap();
        let t = Trajectory::new(
            "g",
            "sum the list",
            None,
            vec![Step::new("planner", "split the list"), Step::new("solver", "sum is nine")],
        )
        .unwrap();
        let e = embed_trajectory(&HashingEmbedder::new(3).unwrap(), &t, false).unwrap();
        let r = loss_gradients(&m, &e, 0.2).unwrap();
        let plain = m.trajectory_loss(&e, 0.2).unwrap();
        assert!((r.loss.total - plain.total).abs() < 1e-12);
        assert_eq!(r.loss.prototype.len(), 6);
        let fd = finite_diff(m.params(), |p| m.loss_at(p, &e, 0.2), 1e-5).unwrap();
        let err = max_relative_error(&r.grads, &fd, 1e-6);
        assert!(err <= 1e-4, "relative error {err}");
    }
}
