use super::{GradError, Graph, NodeId, ParamStore, Scope, Tensor};

fn ensure_finite(g: &Graph, loss: NodeId) -> Result<f64, GradError> {
    if let Some((node, op)) = g.first_invalid_node() {
        return Err(GradError::NonFinite { node: node.index(), op: op.to_string() });
    }
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(GradError::NonFinite { node: loss.index(), op: g.op_name(loss).to_string() });
    }
    Ok(v)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Max over leaf entries of `|analytic − central difference| / max(1, |central difference|)`.
///
/// `build` receives one leaf node per tensor in `leaves` and returns the scalar loss.
pub fn grad_check<F>(build: F, leaves: &[Tensor], eps: f64) -> Result<f64, GradError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, GradError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval = |values: &[Tensor]| -> Result<f64, GradError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        ensure_finite(&g, loss)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    ensure_finite(&g, loss)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, &id) in ids.iter().enumerate() {
        let analytic = grads.wrt(&g, id);
        if !analytic.is_finite() {
            return Err(GradError::NonFinite { node: id.index(), op: "gradient".into() });
        }
        for e in 0..leaves[li].numel() {
            let orig = work[li].data()[e];
            work[li].data_mut()[e] = orig + eps;
            let up = eval(&work)?;
            work[li].data_mut()[e] = orig - eps;
            let down = eval(&work)?;
            work[li].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check of named store parameters through a model builder.
///
/// With `max_entries = Some(n)` only `n` evenly strided entries of each
/// parameter are perturbed.
pub fn grad_check_params<F>(
    store: &ParamStore,
    names: &[&str],
    build: F,
    eps: f64,
    max_entries: Option<usize>,
) -> Result<f64, GradError>
where
    F: Fn(&mut Scope) -> Result<NodeId, GradError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut scope = Scope::new(store);
    let loss = build(&mut scope)?;
    ensure_finite(&scope.graph, loss)?;
    let grads = scope.backward(loss)?;

    let mut work = store.clone();
    let mut worst = 0.0f64;
    for name in names {
        let pid = store.id(name)?;
        let n = store.by_id(pid).numel();
        let analytic = grads
            .get(pid)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.by_id(pid).shape()));
        let stride = max_entries.map_or(1, |m| n.div_ceil(m.max(1)));
        for e in (0..n).step_by(stride) {
            let orig = store.by_id(pid).data()[e];
            let eval = |work: &ParamStore| -> Result<f64, GradError> {
                let mut s = Scope::new(work);
                let l = build(&mut s)?;
                ensure_finite(&s.graph, l)
            };
            work.by_id_mut(pid).data_mut()[e] = orig + eps;
            let up = eval(&work)?;
            work.by_id_mut(pid).data_mut()[e] = orig - eps;
            let down = eval(&work)?;
            work.by_id_mut(pid).data_mut()[e] = orig;
            worst = worst.max(rel_err(analytic.data()[e], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
