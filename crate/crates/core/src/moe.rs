//! Toy Mixture-of-Experts layer: expert FFNs, a dot-product gate, and the
//! layer forward pass.
//!
//! Everything is plain `f64` on `Vec`s — small enough to stay bit-exact and
//! auditable. The forward pass accepts a routing plan (see [`crate::brownout`])
//! so the same code path serves full routing, delegated routing through
//! united experts, and dropped tokens.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::brownout::{GroupExecutor, RoutingPlan};

/// Hidden state for one token; length must equal the layer's `d`.
pub type HiddenVector = Vec<f64>;

/// Errors from layer construction, gating, and the forward pass.
#[derive(Debug, thiserror::Error)]
pub enum MoeError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("routing plan does not match batch: {0}")]
    PlanMismatch(String),
    #[error("plan references united expert {wanted} but the bank holds {have}")]
    MissingUnited { wanted: usize, have: usize },
    #[error("layer json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Elementwise nonlinearity applied between the up and down projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Identity => v,
        }
    }

    /// Derivative at `v` (ReLU uses the subgradient 0 at the kink).
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Two-layer feed-forward expert: `out = act(x · up) · down`.
///
/// `up` is `d x h` row-major (input dim by hidden dim), `down` is `h x d`
/// row-major, both applied with row-vector inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFfn {
    pub d: usize,
    pub h: usize,
    pub up: Vec<f64>,
    pub down: Vec<f64>,
    pub activation: Activation,
}

impl ExpertFfn {
    pub fn new(
        d: usize,
        h: usize,
        up: Vec<f64>,
        down: Vec<f64>,
        activation: Activation,
    ) -> Result<Self, MoeError> {
        if d == 0 || h == 0 {
            return Err(MoeError::Parameter("expert dims must be positive".into()));
        }
        if up.len() != d * h {
            return Err(MoeError::Shape {
                what: "up weights",
                expected: d * h,
                got: up.len(),
            });
        }
        if down.len() != h * d {
            return Err(MoeError::Shape {
                what: "down weights",
                expected: h * d,
                got: down.len(),
            });
        }
        if !up.iter().chain(down.iter()).all(|v| v.is_finite()) {
            return Err(MoeError::NonFinite("expert weights"));
        }
        Ok(Self {
            d,
            h,
            up,
            down,
            activation,
        })
    }

    /// Pre-activation `x · up` (length `h`).
    pub fn preactivation(&self, x: &[f64]) -> Result<Vec<f64>, MoeError> {
        if x.len() != self.d {
            return Err(MoeError::Shape {
                what: "expert input",
                expected: self.d,
                got: x.len(),
            });
        }
        let mut a = vec![0.0; self.h];
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.up[i * self.h..(i + 1) * self.h];
            for (j, &w) in row.iter().enumerate() {
                a[j] += xi * w;
            }
        }
        Ok(a)
    }

    fn random(d: usize, h: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        // Scale keeps residual streams from blowing up across stacked layers.
        let scale = 1.0 / ((d * h) as f64).sqrt();
        let up = (0..d * h)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale * 3.0)
            .collect();
        let down = (0..h * d)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale * 3.0)
            .collect();
        Self {
            d,
            h,
            up,
            down,
            activation,
        }
    }

    /// Averages the weights of `members` (used to seed a united expert before
    /// any distillation has run).
    pub fn weight_mean(members: &[&ExpertFfn]) -> Result<Self, MoeError> {
        let first = members
            .first()
            .ok_or_else(|| MoeError::Parameter("weight_mean of empty group".into()))?;
        let n = members.len() as f64;
        let mut up = vec![0.0; first.up.len()];
        let mut down = vec![0.0; first.down.len()];
        for m in members {
            if m.d != first.d || m.h != first.h {
                return Err(MoeError::Parameter(
                    "weight_mean requires uniform expert dims".into(),
                ));
            }
            for (acc, w) in up.iter_mut().zip(&m.up) {
                *acc += w / n;
            }
            for (acc, w) in down.iter_mut().zip(&m.down) {
                *acc += w / n;
            }
        }
        ExpertFfn::new(first.d, first.h, up, down, first.activation)
    }
}

/// Applies one expert to one token.
pub fn expert_forward(expert: &ExpertFfn, x: &[f64]) -> Result<HiddenVector, MoeError> {
    let a = expert.preactivation(x)?;
    let mut out = vec![0.0; expert.d];
    for (j, &aj) in a.iter().enumerate() {
        let z = expert.activation.apply(aj);
        if z != 0.0 {
            let row = &expert.down[j * expert.d..(j + 1) * expert.d];
            for (c, &w) in row.iter().enumerate() {
                out[c] += z * w;
            }
        }
    }
    Ok(out)
}

/// Dot-product gate: one centroid per routed expert plus the top-K width.
#[derive(Debug, Clone, PartialEq)]
pub struct GateUnit {
    pub centroids: Vec<Vec<f64>>,
    pub top_k: usize,
}

impl GateUnit {
    pub fn new(centroids: Vec<Vec<f64>>, top_k: usize) -> Result<Self, MoeError> {
        if centroids.is_empty() {
            return Err(MoeError::Parameter("gate needs at least one expert".into()));
        }
        if top_k == 0 || top_k > centroids.len() {
            return Err(MoeError::Parameter(format!(
                "top_k {} out of range for {} experts",
                top_k,
                centroids.len()
            )));
        }
        let d = centroids[0].len();
        for c in &centroids {
            if c.len() != d {
                return Err(MoeError::Shape {
                    what: "gate centroid",
                    expected: d,
                    got: c.len(),
                });
            }
            if !c.iter().all(|v| v.is_finite()) {
                return Err(MoeError::NonFinite("gate centroids"));
            }
        }
        Ok(Self { centroids, top_k })
    }

    pub fn num_experts(&self) -> usize {
        self.centroids.len()
    }
}

/// Affinity score of `x` against every expert centroid.
pub fn gate_scores(gate: &GateUnit, x: &[f64]) -> Result<Vec<f64>, MoeError> {
    let d = gate.centroids[0].len();
    if x.len() != d {
        return Err(MoeError::Shape {
            what: "gate input",
            expected: d,
            got: x.len(),
        });
    }
    Ok(gate
        .centroids
        .iter()
        .map(|c| c.iter().zip(x).map(|(ci, xi)| ci * xi).sum())
        .collect())
}

/// Softmax over the K best scores; everything else stays zero.
///
/// Ties on the score pick the lower expert id, so results are deterministic.
pub fn gate_weights(scores: &[f64], top_k: usize) -> Result<Vec<f64>, MoeError> {
    if top_k == 0 || top_k > scores.len() {
        return Err(MoeError::Parameter(format!(
            "top_k {} out of range for {} scores",
            top_k,
            scores.len()
        )));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(MoeError::NonFinite("gate scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores checked finite")
            .then(a.cmp(&b))
    });
    let mut selected = order[..top_k].to_vec();
    selected.sort_unstable();

    let max = selected
        .iter()
        .map(|&i| scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected.iter().map(|&i| (scores[i] - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let mut g = vec![0.0; scores.len()];
    for (&i, e) in selected.iter().zip(exps) {
        g[i] = e / denom;
    }
    Ok(g)
}

/// One token's selected experts (ascending id) and their gate weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute {
    pub expert_ids: Vec<usize>,
    pub weights: Vec<f64>,
}

/// A batch of tokens together with the gate's top-K picks for each.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<HiddenVector>,
    pub routes: Vec<TokenRoute>,
}

impl TokenBatch {
    /// Gates every token through the layer's gate unit.
    pub fn gate(layer: &MoeLayer, tokens: Vec<HiddenVector>) -> Result<Self, MoeError> {
        let mut routes = Vec::with_capacity(tokens.len());
        for x in &tokens {
            let scores = gate_scores(&layer.gate, x)?;
            let g = gate_weights(&scores, layer.gate.top_k)?;
            let mut expert_ids = Vec::with_capacity(layer.gate.top_k);
            let mut weights = Vec::with_capacity(layer.gate.top_k);
            for (i, &w) in g.iter().enumerate() {
                if w != 0.0 {
                    expert_ids.push(i);
                    weights.push(w);
                }
            }
            routes.push(TokenRoute {
                expert_ids,
                weights,
            });
        }
        Ok(Self { tokens, routes })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One MoE layer: shared experts always run, routed experts run per the gate,
/// and the united bank stands in for groups of routed experts under
/// delegation. `group_size` is the merge width the united bank was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub d: usize,
    pub h: usize,
    pub group_size: usize,
    pub shared: Vec<ExpertFfn>,
    pub experts: Vec<ExpertFfn>,
    pub united: Vec<ExpertFfn>,
    pub gate: GateUnit,
}

impl MoeLayer {
    pub fn new(
        d: usize,
        h: usize,
        group_size: usize,
        shared: Vec<ExpertFfn>,
        experts: Vec<ExpertFfn>,
        united: Vec<ExpertFfn>,
        gate: GateUnit,
    ) -> Result<Self, MoeError> {
        let layer = Self {
            d,
            h,
            group_size,
            shared,
            experts,
            united,
            gate,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        if self.d == 0 || self.h == 0 {
            return Err(MoeError::Parameter("layer dims must be positive".into()));
        }
        if self.experts.is_empty() {
            return Err(MoeError::Parameter("layer needs routed experts".into()));
        }
        if self.group_size == 0 {
            return Err(MoeError::Parameter("group_size must be positive".into()));
        }
        for e in self.shared.iter().chain(&self.experts).chain(&self.united) {
            if e.d != self.d || e.h != self.h {
                return Err(MoeError::Shape {
                    what: "expert dims",
                    expected: self.d,
                    got: e.d,
                });
            }
        }
        if self.gate.num_experts() != self.experts.len() {
            return Err(MoeError::Shape {
                what: "gate centroids",
                expected: self.experts.len(),
                got: self.gate.num_experts(),
            });
        }
        if self.gate.centroids[0].len() != self.d {
            return Err(MoeError::Shape {
                what: "gate centroid dim",
                expected: self.d,
                got: self.gate.centroids[0].len(),
            });
        }
        if !self.united.is_empty() && self.united.len() != self.united_group_count() {
            return Err(MoeError::Shape {
                what: "united bank",
                expected: self.united_group_count(),
                got: self.united.len(),
            });
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Number of united groups: ceil(m / group_size).
    pub fn united_group_count(&self) -> usize {
        self.experts.len().div_ceil(self.group_size)
    }

    /// Expert ids belonging to united group `g` (the last group may be short).
    pub fn group_members(&self, g: usize) -> std::ops::Range<usize> {
        let start = g * self.group_size;
        let end = ((g + 1) * self.group_size).min(self.experts.len());
        start..end
    }

    /// Fresh random layer; the united bank starts as per-group weight means,
    /// which [`crate::distill::distill_layer`] can then refine.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        d: usize,
        h: usize,
        num_experts: usize,
        group_size: usize,
        n_shared: usize,
        top_k: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self, MoeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared: Vec<ExpertFfn> = (0..n_shared)
            .map(|_| ExpertFfn::random(d, h, activation, &mut rng))
            .collect();
        let experts: Vec<ExpertFfn> = (0..num_experts)
            .map(|_| ExpertFfn::random(d, h, activation, &mut rng))
            .collect();
        let centroids: Vec<Vec<f64>> = (0..num_experts)
            .map(|_| {
                let raw: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                raw.into_iter().map(|v| v / norm).collect()
            })
            .collect();
        let gate = GateUnit::new(centroids, top_k)?;
        let groups = num_experts.div_ceil(group_size);
        let mut united = Vec::with_capacity(groups);
        for g in 0..groups {
            let members: Vec<&ExpertFfn> = experts
                [g * group_size..((g + 1) * group_size).min(num_experts)]
                .iter()
                .collect();
            united.push(ExpertFfn::weight_mean(&members)?);
        }
        MoeLayer::new(d, h, group_size, shared, experts, united, gate)
    }
}

fn axpy(acc: &mut [f64], w: f64, v: &[f64]) {
    for (a, &x) in acc.iter_mut().zip(v) {
        *a += w * x;
    }
}

/// Residual + shared experts + routed experts under a brownout plan.
///
/// Pairs assigned to the covered set run their original expert; delegated
/// pairs run their group's executor (united expert, or the original for
/// singleton groups); dropped pairs contribute nothing. With an all-covered
/// plan this reproduces [`standard_moe_forward`] bit for bit.
pub fn moe_forward(
    layer: &MoeLayer,
    batch: &TokenBatch,
    plan: &RoutingPlan,
) -> Result<Vec<HiddenVector>, MoeError> {
    check_batch(layer, batch)?;
    let m = layer.num_experts();

    #[derive(Clone, Copy)]
    enum Disposition {
        Covered,
        Delegated(GroupExecutor),
        Dropped,
    }
    let mut disposition: Vec<Option<Disposition>> = vec![None; m];
    let mut plan_tokens: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut place = |expert_id: usize,
                     tokens: &[usize],
                     disp: Disposition|
     -> Result<(), MoeError> {
        if expert_id >= m {
            return Err(MoeError::PlanMismatch(format!(
                "plan names expert {expert_id} but the layer has {m}"
            )));
        }
        if disposition[expert_id].is_some() {
            return Err(MoeError::PlanMismatch(format!(
                "expert {expert_id} appears twice in the plan"
            )));
        }
        disposition[expert_id] = Some(disp);
        plan_tokens[expert_id] = tokens.to_vec();
        Ok(())
    };

    for a in &plan.s1 {
        place(a.expert_id, &a.token_indices, Disposition::Covered)?;
    }
    for group in &plan.s2_groups {
        if let GroupExecutor::United(g) = group.executor {
            if g >= layer.united.len() {
                return Err(MoeError::MissingUnited {
                    wanted: g,
                    have: layer.united.len(),
                });
            }
        }
        let mut offset = 0;
        for member in &group.members {
            let tokens = &group.merged_token_indices[offset..offset + member.token_count];
            place(
                member.expert_id,
                tokens,
                Disposition::Delegated(group.executor),
            )?;
            offset += member.token_count;
        }
    }
    for a in &plan.dropped {
        place(a.expert_id, &a.token_indices, Disposition::Dropped)?;
    }

    // The plan must cover exactly the batch's routed pairs.
    let mut batch_tokens: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (t, route) in batch.routes.iter().enumerate() {
        for &id in &route.expert_ids {
            batch_tokens[id].push(t);
        }
    }
    for id in 0..m {
        let mut want = batch_tokens[id].clone();
        let mut got = plan_tokens[id].clone();
        want.sort_unstable();
        got.sort_unstable();
        if want != got {
            return Err(MoeError::PlanMismatch(format!(
                "expert {id}: batch routes {} pairs, plan holds {}",
                want.len(),
                got.len()
            )));
        }
        if !want.is_empty() && disposition[id].is_none() {
            return Err(MoeError::PlanMismatch(format!(
                "expert {id} routed in batch but absent from plan"
            )));
        }
    }

    let mut outputs = Vec::with_capacity(batch.len());
    for (x, route) in batch.tokens.iter().zip(&batch.routes) {
        let mut out = x.clone();
        for s in &layer.shared {
            let y = expert_forward(s, x)?;
            axpy(&mut out, 1.0, &y);
        }
        for (&id, &w) in route.expert_ids.iter().zip(&route.weights) {
            match disposition[id].expect("routed experts verified present") {
                Disposition::Covered => {
                    let y = expert_forward(&layer.experts[id], x)?;
                    axpy(&mut out, w, &y);
                }
                Disposition::Delegated(GroupExecutor::United(g)) => {
                    let y = expert_forward(&layer.united[g], x)?;
                    axpy(&mut out, w, &y);
                }
                Disposition::Delegated(GroupExecutor::Original(e)) => {
                    let y = expert_forward(&layer.experts[e], x)?;
                    axpy(&mut out, w, &y);
                }
                Disposition::Dropped => {}
            }
        }
        outputs.push(out);
    }
    Ok(outputs)
}

/// Plain top-K MoE forward pass with no delegation or drops — the reference
/// the brownout path must match exactly when every expert is covered.
pub fn standard_moe_forward(
    layer: &MoeLayer,
    batch: &TokenBatch,
) -> Result<Vec<HiddenVector>, MoeError> {
    check_batch(layer, batch)?;
    let mut outputs = Vec::with_capacity(batch.len());
    for (x, route) in batch.tokens.iter().zip(&batch.routes) {
        let mut out = x.clone();
        for s in &layer.shared {
            let y = expert_forward(s, x)?;
            axpy(&mut out, 1.0, &y);
        }
        for (&id, &w) in route.expert_ids.iter().zip(&route.weights) {
            let y = expert_forward(&layer.experts[id], x)?;
            axpy(&mut out, w, &y);
        }
        outputs.push(out);
    }
    Ok(outputs)
}

fn check_batch(layer: &MoeLayer, batch: &TokenBatch) -> Result<(), MoeError> {
    if batch.tokens.len() != batch.routes.len() {
        return Err(MoeError::Shape {
            what: "batch routes",
            expected: batch.tokens.len(),
            got: batch.routes.len(),
        });
    }
    let m = layer.num_experts();
    for (x, route) in batch.tokens.iter().zip(&batch.routes) {
        if x.len() != layer.d {
            return Err(MoeError::Shape {
                what: "token vector",
                expected: layer.d,
                got: x.len(),
            });
        }
        if route.expert_ids.len() != route.weights.len() {
            return Err(MoeError::Shape {
                what: "route weights",
                expected: route.expert_ids.len(),
                got: route.weights.len(),
            });
        }
        if route.expert_ids.iter().any(|&id| id >= m) {
            return Err(MoeError::Parameter("route names unknown expert".into()));
        }
        if route.expert_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MoeError::Parameter(
                "route expert ids must be strictly ascending".into(),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// JSON layer format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FfnDoc {
    up: Vec<f64>,
    down: Vec<f64>,
    #[serde(default)]
    activation: Activation,
}

/// On-disk layer document: dims plus flat row-major weight arrays, so a
/// distilled layer can be written by one tool and loaded by another.
#[derive(Serialize, Deserialize)]
struct LayerDoc {
    d: usize,
    h: usize,
    m: usize,
    k: usize,
    n_shared: usize,
    top_k: usize,
    centroids: Vec<Vec<f64>>,
    shared: Vec<FfnDoc>,
    experts: Vec<FfnDoc>,
    #[serde(default)]
    united: Vec<FfnDoc>,
}

impl MoeLayer {
    pub fn to_json(&self) -> Result<String, MoeError> {
        let ffn_doc = |e: &ExpertFfn| FfnDoc {
            up: e.up.clone(),
            down: e.down.clone(),
            activation: e.activation,
        };
        let doc = LayerDoc {
            d: self.d,
            h: self.h,
            m: self.experts.len(),
            k: self.group_size,
            n_shared: self.shared.len(),
            top_k: self.gate.top_k,
            centroids: self.gate.centroids.clone(),
            shared: self.shared.iter().map(ffn_doc).collect(),
            experts: self.experts.iter().map(ffn_doc).collect(),
            united: self.united.iter().map(ffn_doc).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self, MoeError> {
        let doc: LayerDoc = serde_json::from_str(text)?;
        if doc.experts.len() != doc.m {
            return Err(MoeError::Shape {
                what: "experts array",
                expected: doc.m,
                got: doc.experts.len(),
            });
        }
        if doc.shared.len() != doc.n_shared {
            return Err(MoeError::Shape {
                what: "shared array",
                expected: doc.n_shared,
                got: doc.shared.len(),
            });
        }
        let build = |f: FfnDoc| ExpertFfn::new(doc.d, doc.h, f.up, f.down, f.activation);
        let shared = doc.shared.into_iter().map(build).collect::<Result<_, _>>()?;
        let experts = doc
            .experts
            .into_iter()
            .map(build)
            .collect::<Result<_, _>>()?;
        let united = doc
            .united
            .into_iter()
            .map(build)
            .collect::<Result<_, _>>()?;
        let gate = GateUnit::new(doc.centroids, doc.top_k)?;
        MoeLayer::new(doc.d, doc.h, doc.k, shared, experts, united, gate)
    }
}
