use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParameterSet, Result, TensorError, Var};

/// Knobs for [`grad_check`]'s parameter sampling.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Floor for `eps` when a probe straddles a rectifier kink. Each
    /// straddling probe is retried at a tenth of the step until it no longer
    /// crosses one or the floor is reached.
    pub min_eps: f64,
    /// Entries checked per parameter tensor (all entries if smaller).
    pub per_tensor: usize,
    pub seed: u64,
    pub sabotage: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            min_eps: 1e-8,
            per_tensor: 4,
            seed: 0,
            sabotage: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients with central differences.
///
/// The relative error of one entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F>(forward: F, params: &ParameterSet, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    grad_check_with(
        forward,
        params,
        &GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<F>(
    forward: F,
    params: &ParameterSet,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut graph = if opts.sabotage {
        Graph::new().with_sabotaged_gradients()
    } else {
        Graph::new()
    };
    let loss = forward(&mut graph, params)?;
    check_finite(graph.value(loss).data()[0])?;
    let analytic = graph.backward(loss)?.for_params(params);
    drop(graph);

    let eval = |p: &ParameterSet| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::frozen();
        let l = forward(&mut g, p)?;
        let v = g.value(l).data()[0];
        check_finite(v)?;
        Ok((v, g.rectifier_pattern()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let picks: Vec<usize> = if n <= opts.per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for idx in picks {
            let orig = tensor.data()[idx];
            let mut eps = opts.eps;
            let numeric = loop {
                work.get_mut(name).unwrap().data_mut()[idx] = orig + eps;
                let (plus, above) = eval(&work)?;
                work.get_mut(name).unwrap().data_mut()[idx] = orig - eps;
                let (minus, below) = eval(&work)?;
                work.get_mut(name).unwrap().data_mut()[idx] = orig;
                if above == below || eps <= opts.min_eps * 1.01 {
                    break (plus - minus) / (2.0 * eps);
                }
                eps /= 10.0;
            };
            let a = analytic[name].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

type PrimitiveForward = Box<dyn Fn(&mut Graph, &ParameterSet) -> Result<Var>>;

/// Runs [`grad_check`] on every differentiable primitive of [`Graph`] with
/// small random shapes drawn from `seed`. Returns one report per primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use super::attention::{multi_head_attention, AttentionWeights};
    use super::Tensor;
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize]| -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("shape")
    };
    // Away from relu's kink so central differences stay on one side.
    let mut kinkless = rand_t(&[3, 4]);
    kinkless
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = v.signum() * (0.2 + v.abs()));
    let mut probs = rand_t(&[5]);
    probs.data_mut().iter_mut().for_each(|v| *v = 0.15 + 0.35 * (*v + 1.0));

    let mut cases: Vec<(&'static str, ParameterSet, PrimitiveForward)> = Vec::new();
    let set = |items: Vec<(&str, Tensor)>| -> ParameterSet {
        items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    };
    // Every case ends in a weighted sum so upstream gradients are not uniform.
    fn project(g: &mut Graph, x: Var, weights: &Tensor) -> Result<Var> {
        let w = g.constant(weights.clone().reshape(g.shape(x))?);
        let y = g.mul(x, w)?;
        g.sum(y)
    }

    let r = rand_t(&[3, 4]);
    cases.push(("add", set(vec![("a", rand_t(&[3, 4])), ("b", rand_t(&[3, 4]))]), Box::new(move |g, p| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.add(a, b)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[2, 3, 4]);
    cases.push(("add_bcast", set(vec![("a", rand_t(&[2, 3, 4])), ("b", rand_t(&[3, 4]))]), Box::new(move |g, p| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.add_bcast(a, b)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[3, 4]);
    cases.push(("mul", set(vec![("a", rand_t(&[3, 4])), ("b", rand_t(&[3, 4]))]), Box::new(move |g, p| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.mul(a, b)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[3, 4]);
    cases.push(("mul_bcast", set(vec![("a", rand_t(&[3, 4])), ("b", rand_t(&[4]))]), Box::new(move |g, p| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.mul_bcast(a, b)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[3, 4]);
    cases.push(("scale", set(vec![("a", rand_t(&[3, 4]))]), Box::new(move |g, p| {
        let a = g.param(p, "a")?;
        let y = g.scale(a, -1.7)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[2, 3, 5]);
    cases.push(("linear", set(vec![("x", rand_t(&[2, 3, 4])), ("w", rand_t(&[5, 4])), ("b", rand_t(&[5]))]), Box::new(move |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        let y = g.linear(x, w, Some(b))?;
        project(g, y, &r)
    })));
    let r = rand_t(&[2, 3, 5]);
    cases.push(("bmm", set(vec![("a", rand_t(&[2, 3, 4])), ("b", rand_t(&[2, 4, 5]))]), Box::new(move |g, p| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.bmm(a, b, false)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[2, 3, 5]);
    cases.push(("bmm_transposed", set(vec![("a", rand_t(&[2, 3, 4])), ("b", rand_t(&[2, 5, 4]))]), Box::new(move |g, p| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.bmm(a, b, true)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[4, 2, 3]);
    cases.push(("permute", set(vec![("a", rand_t(&[2, 3, 4]))]), Box::new(move |g, p| {
        let a = g.param(p, "a")?;
        let y = g.permute(a, &[2, 0, 1])?;
        project(g, y, &r)
    })));
    let r = rand_t(&[3, 4]);
    cases.push(("softmax", set(vec![("a", rand_t(&[3, 4]))]), Box::new(move |g, p| {
        let a = g.param(p, "a")?;
        let y = g.softmax(a, 1)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[3, 4]);
    cases.push(("softmax_axis0", set(vec![("a", rand_t(&[3, 4]))]), Box::new(move |g, p| {
        let a = g.param(p, "a")?;
        let y = g.softmax(a, 0)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[3, 4]);
    cases.push(("layer_norm", set(vec![("x", rand_t(&[3, 4])), ("g", rand_t(&[4])), ("b", rand_t(&[4]))]), Box::new(move |g, p| {
        let (x, ga, b) = (g.param(p, "x")?, g.param(p, "g")?, g.param(p, "b")?);
        let y = g.layer_norm(x, ga, b, 1e-5)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[3, 4]);
    cases.push(("gelu", set(vec![("a", rand_t(&[3, 4]))]), Box::new(move |g, p| {
        let a = g.param(p, "a")?;
        let y = g.gelu(a)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[3, 4]);
    cases.push(("relu", set(vec![("a", kinkless)]), Box::new(move |g, p| {
        let a = g.param(p, "a")?;
        let y = g.relu(a)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[2, 5, 3]);
    cases.push(("concat", set(vec![("a", rand_t(&[2, 2, 3])), ("b", rand_t(&[2, 3, 3]))]), Box::new(move |g, p| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.concat(&[a, b], 1)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[2, 2, 3]);
    cases.push(("narrow", set(vec![("a", rand_t(&[2, 4, 3]))]), Box::new(move |g, p| {
        let a = g.param(p, "a")?;
        let y = g.narrow(a, 1, 1, 2)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[2, 3]);
    cases.push(("mean_axis", set(vec![("a", rand_t(&[2, 4, 3]))]), Box::new(move |g, p| {
        let a = g.param(p, "a")?;
        let y = g.mean_axis(a, 1)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[2, 3, 4]);
    cases.push(("expand", set(vec![("a", rand_t(&[4]))]), Box::new(move |g, p| {
        let a = g.param(p, "a")?;
        let y = g.expand(a, &[2, 3])?;
        project(g, y, &r)
    })));
    let r = rand_t(&[2, 3, 6]);
    cases.push(("conv1d", set(vec![("x", rand_t(&[2, 2, 6])), ("w", rand_t(&[3, 2, 3])), ("b", rand_t(&[3]))]), Box::new(move |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        let y = g.conv1d(x, w, Some(b), 1, 1)?;
        project(g, y, &r)
    })));
    let r = rand_t(&[2, 3, 3, 3]);
    cases.push(("conv2d", set(vec![("x", rand_t(&[2, 2, 5, 5])), ("w", rand_t(&[3, 2, 3, 3])), ("b", rand_t(&[3]))]), Box::new(move |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        let y = g.conv2d(x, w, Some(b), 2, 1)?;
        project(g, y, &r)
    })));
    let labels = vec![1.0, 0.0, 1.0, 1.0, 0.0];
    cases.push(("bce", set(vec![("p", probs)]), Box::new(move |g, p| {
        let x = g.param(p, "p")?;
        g.bce(x, &labels)
    })));
    let r = rand_t(&[2, 3, 4]);
    let mut attn_params = vec![("x", rand_t(&[2, 3, 4]))];
    for name in ["wq", "wk", "wv", "wo"] {
        attn_params.push((name, rand_t(&[4, 4])));
    }
    for name in ["bq", "bv", "bo"] {
        attn_params.push((name, rand_t(&[4])));
    }
    cases.push(("attention", set(attn_params), Box::new(move |g, p| {
        let x = g.param(p, "x")?;
        let w = AttentionWeights {
            wq: g.param(p, "wq")?,
            bq: Some(g.param(p, "bq")?),
            wk: g.param(p, "wk")?,
            bk: None,
            wv: g.param(p, "wv")?,
            bv: Some(g.param(p, "bv")?),
            wo: g.param(p, "wo")?,
            bo: Some(g.param(p, "bo")?),
        };
        let y = multi_head_attention(g, x, x, x, 2, &w)?;
        project(g, y, &r)
    })));
    let labels = vec![1.0, 0.0, 1.0];
    cases.push(("softmax_bce", set(vec![("w", rand_t(&[2, 2])), ("x", rand_t(&[3, 2]))]), Box::new(move |g, p| {
        let (w, x) = (g.param(p, "w")?, g.param(p, "x")?);
        let logits = g.linear(x, w, None)?;
        let probs = g.softmax(logits, 1)?;
        let real = g.narrow(probs, 1, 0, 1)?;
        let real = g.reshape(real, &[3])?;
        g.bce(real, &labels)
    })));

    let opts = GradCheckOptions {
        eps: 1e-5,
        per_tensor: usize::MAX,
        seed,
        ..GradCheckOptions::default()
    };
    cases
        .into_iter()
        .map(|(name, params, f)| Ok((name, grad_check_with(f, &params, &opts)?)))
        .collect()
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(format!("forward value {v}")))
    }
}
