//! Recursive layer-wise encoder over a [`TcrDigraph`].
//!
//! Each layer computes, per edge `(src, rt, dst)`:
//!
//! * a gated message from the source state, the temporal relation and the
//!   query relation,
//! * a query-conditioned attention logit, normalised with a softmax over the
//!   in-edges of `dst`,
//!
//! then aggregates the weighted messages per destination, scales by
//! `1/sqrt(indegree)` and feeds the result through a GRU whose hidden state
//! is the destination's previous-layer state (zero when absent).
//!
//! Layer 1 over the global one-hop history is the shallow reasoner, layers
//! `2..=L` over the local window are the deep reasoner. Both share this code.
//!
//! The single-edge functions ([`qtr_gru_message`], [`attention_weights`],
//! [`aggregate_and_update`]) mirror the batched path and are kept public for
//! inspection and testing.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};

use crate::config::Ablation;
use crate::digraph::{QueryContext, TcrDigraph};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_grad, log_sum_exp_with_zeros, sigmoid};
use crate::params::{LayerParams, ModelParams};
use crate::store::{EntityId, RelationId};
use crate::temporal::{TimeEncodingTable, TrBatch};

/// Entity → state rows for one layer. Entities are sorted; absent means zero.
#[derive(Clone, Debug, PartialEq)]
pub struct StateMap {
    pub entities: Vec<EntityId>,
    pub states: Array2<f64>,
}

impl StateMap {
    pub fn empty(dim: usize) -> Self {
        Self {
            entities: Vec::new(),
            states: Array2::zeros((0, dim)),
        }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, e: EntityId) -> Option<ArrayView1<'_, f64>> {
        self.entities
            .binary_search(&e)
            .ok()
            .map(|i| self.states.row(i))
    }
}

/// Intermediate values of one message cell.
#[derive(Clone, Debug, PartialEq)]
pub struct QtrGruOutput {
    pub update_gate: Array1<f64>,
    pub forget_gate: Array1<f64>,
    pub candidate: Array1<f64>,
    pub message: Array1<f64>,
}

fn check_len(v: &ArrayView1<f64>, d: usize, what: &str) -> Result<()> {
    if v.len() != d {
        return Err(Error::Shape(format!("{what} has length {}, expected {d}", v.len())));
    }
    Ok(())
}

/// Gated message cell with all intermediates.
pub fn qtr_gru_cell(
    h_src: ArrayView1<f64>,
    h_rt: ArrayView1<f64>,
    h_q: ArrayView1<f64>,
    lp: &LayerParams,
) -> Result<QtrGruOutput> {
    let d = lp.w_cand.nrows();
    check_len(&h_src, d, "source state")?;
    check_len(&h_rt, d, "temporal relation")?;
    check_len(&h_q, d, "query relation")?;
    let z = concatenate![Axis(0), h_src, h_rt, h_q];
    let update_gate = (lp.w_update.dot(&z) + &lp.b_update).mapv(sigmoid);
    let forget_gate = (lp.w_forget.dot(&z) + &lp.b_forget).mapv(sigmoid);
    let cin = &h_rt + &(&forget_gate * &h_src);
    let candidate = (lp.w_cand.dot(&cin) + &lp.b_cand).mapv(f64::tanh);
    let message = &h_src * &update_gate.mapv(|g| 1.0 - g) + &update_gate * &candidate;
    Ok(QtrGruOutput {
        update_gate,
        forget_gate,
        candidate,
        message,
    })
}

/// Message `m = (1 - g_u) * h_src + g_u * h_c`.
pub fn qtr_gru_message(
    h_src: ArrayView1<f64>,
    h_rt: ArrayView1<f64>,
    h_q: ArrayView1<f64>,
    lp: &LayerParams,
) -> Result<Array1<f64>> {
    qtr_gru_cell(h_src, h_rt, h_q, lp).map(|o| o.message)
}

/// Unnormalised attention `sigmoid(w_att . LReLU(W_src h_src + W_rel h_rt + W_q h_q))`.
pub fn attention_logit(
    h_src: ArrayView1<f64>,
    h_rt: ArrayView1<f64>,
    h_q: ArrayView1<f64>,
    lp: &LayerParams,
) -> Result<f64> {
    let d = lp.w_src.nrows();
    check_len(&h_src, d, "source state")?;
    check_len(&h_rt, d, "temporal relation")?;
    check_len(&h_q, d, "query relation")?;
    let pre = lp.w_src.dot(&h_src) + lp.w_rel.dot(&h_rt) + lp.w_query.dot(&h_q);
    Ok(sigmoid(pre.mapv(leaky_relu).dot(&lp.w_att)))
}

/// Softmax-normalised attention over the in-edges `(h_src, h_rt)` of one entity.
pub fn attention_weights(
    in_edges: &[(ArrayView1<f64>, ArrayView1<f64>)],
    h_q: ArrayView1<f64>,
    lp: &LayerParams,
) -> Result<Vec<f64>> {
    if in_edges.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let logits = in_edges
        .iter()
        .map(|(s, r)| attention_logit(*s, *r, h_q, lp))
        .collect::<Result<Vec<_>>>()?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|c| (c - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Standard GRU cell (reset, update, new) with `prev` as hidden state.
pub fn gru_update(prev: ArrayView1<f64>, input: ArrayView1<f64>, lp: &LayerParams) -> Array1<f64> {
    let d = prev.len();
    let gi = lp.gru_w_ih.dot(&input) + &lp.gru_b_ih;
    let gh = lp.gru_w_hh.dot(&prev) + &lp.gru_b_hh;
    Array1::from_shape_fn(d, |k| {
        let r = sigmoid(gi[k] + gh[k]);
        let z = sigmoid(gi[d + k] + gh[d + k]);
        let n = (gi[2 * d + k] + r * gh[2 * d + k]).tanh();
        (1.0 - z) * n + z * prev[k]
    })
}

/// `GRU(prev, W_agg (sum a_i m_i) / sqrt(indegree))`.
pub fn aggregate_and_update(
    weighted_messages: &[(f64, ArrayView1<f64>)],
    prev: ArrayView1<f64>,
    lp: &LayerParams,
) -> Result<Array1<f64>> {
    if weighted_messages.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let d = lp.w_agg.nrows();
    check_len(&prev, d, "previous state")?;
    let mut sum = Array1::<f64>::zeros(d);
    for (a, m) in weighted_messages {
        check_len(m, d, "message")?;
        sum.scaled_add(*a, m);
    }
    let scaled = lp.w_agg.dot(&sum) / (weighted_messages.len() as f64).sqrt();
    Ok(gru_update(prev, scaled.view(), lp))
}

/// Result of encoding one query.
#[derive(Clone, Debug)]
pub struct Encoding {
    /// States of the last layer's entities.
    pub states: StateMap,
    /// Per-layer states; index 0 is the zero-initialised query entity.
    pub layer_states: Vec<StateMap>,
    /// `attention[l][i]` is the weight of `digraph.layers[l][i]`.
    pub attention: Vec<Vec<f64>>,
    /// Smallest and largest gate activation seen (NaN-free runs only).
    pub gate_bounds: (f64, f64),
}

struct LayerPlan {
    src_rows: Vec<usize>,
    pair_idx: Vec<usize>,
    dst_rows: Vec<usize>,
    prev_row_of_dst: Vec<Option<usize>>,
    inv_sqrt_indeg: Array1<f64>,
}

struct Plan {
    /// Distinct `(relation, relative time)`; entry 0 is the query relation at offset 0.
    pairs: Vec<(RelationId, u32)>,
    layers: Vec<LayerPlan>,
}

fn plan(g: &TcrDigraph, q: &QueryContext) -> Plan {
    let mut pairs = vec![(q.relation, 0)];
    let mut pair_ids: HashMap<(RelationId, u32), usize> = HashMap::new();
    pair_ids.insert((q.relation, 0), 0);
    let mut layers = Vec::with_capacity(g.layers.len());
    for (l, edges) in g.layers.iter().enumerate() {
        let prev = &g.entity_sets[l];
        let cur = &g.entity_sets[l + 1];
        let mut src_rows = Vec::with_capacity(edges.len());
        let mut pair_idx = Vec::with_capacity(edges.len());
        let mut dst_rows = Vec::with_capacity(edges.len());
        let mut indeg = vec![0usize; cur.len()];
        for e in edges {
            src_rows.push(prev.binary_search(&e.src).expect("edge source in previous layer"));
            let dst = cur.binary_search(&e.dst).expect("edge destination in layer");
            dst_rows.push(dst);
            indeg[dst] += 1;
            let key = (e.relation, g.query_time - e.time);
            let next = pairs.len();
            let id = *pair_ids.entry(key).or_insert(next);
            if id == next {
                pairs.push(key);
            }
            pair_idx.push(id);
        }
        let prev_row_of_dst = cur.iter().map(|e| prev.binary_search(e).ok()).collect();
        let inv_sqrt_indeg = indeg
            .iter()
            .map(|&k| if k == 0 { 0.0 } else { 1.0 / (k as f64).sqrt() })
            .collect();
        layers.push(LayerPlan {
            src_rows,
            pair_idx,
            dst_rows,
            prev_row_of_dst,
            inv_sqrt_indeg,
        });
    }
    Plan { pairs, layers }
}

struct LayerCache {
    x_src: Array2<f64>,
    hrt: Array2<f64>,
    z: Array2<f64>,
    gu: Array2<f64>,
    gf: Array2<f64>,
    cin: Array2<f64>,
    hc: Array2<f64>,
    m: Array2<f64>,
    att_pre: Array2<f64>,
    att_lr: Array2<f64>,
    c: Array1<f64>,
    a: Array1<f64>,
    agg: Array2<f64>,
    h_hat: Array2<f64>,
    h_prev: Array2<f64>,
    gh: Array2<f64>,
    r: Array2<f64>,
    zg: Array2<f64>,
    ng: Array2<f64>,
    out: Array2<f64>,
}

fn rows_scale(m: &Array2<f64>, scale: &Array1<f64>) -> Array2<f64> {
    m * &scale.view().insert_axis(Axis(1))
}

fn layer_forward(
    lp: &LayerParams,
    plan: &LayerPlan,
    prev: &Array2<f64>,
    hrt_all: &Array2<f64>,
    hq: ArrayView1<f64>,
    qtr: bool,
) -> LayerCache {
    let d = prev.ncols();
    let n = plan.prev_row_of_dst.len();
    let e = plan.src_rows.len();
    let x_src = prev.select(Axis(0), &plan.src_rows);
    let hrt = hrt_all.select(Axis(0), &plan.pair_idx);
    let empty = || Array2::zeros((0, 0));

    let (z, gu, gf, cin, hc, m) = if qtr {
        let hq_b = hq.broadcast((e, d)).unwrap();
        let z = concatenate![Axis(1), x_src, hrt, hq_b];
        let gu = (z.dot(&lp.w_update.t()) + &lp.b_update).mapv(sigmoid);
        let gf = (z.dot(&lp.w_forget.t()) + &lp.b_forget).mapv(sigmoid);
        let cin = &hrt + &(&gf * &x_src);
        let hc = (cin.dot(&lp.w_cand.t()) + &lp.b_cand).mapv(f64::tanh);
        let m = &x_src * &gu.mapv(|g| 1.0 - g) + &gu * &hc;
        (z, gu, gf, cin, hc, m)
    } else {
        let m = &x_src + &hrt;
        (empty(), empty(), empty(), empty(), empty(), m)
    };

    let q_proj = lp.w_query.dot(&hq);
    let att_pre = x_src.dot(&lp.w_src.t()) + hrt.dot(&lp.w_rel.t()) + &q_proj;
    let att_lr = att_pre.mapv(leaky_relu);
    let c = att_lr.dot(&lp.w_att).mapv(sigmoid);

    let mut group_max = vec![f64::NEG_INFINITY; n];
    for (i, &dst) in plan.dst_rows.iter().enumerate() {
        group_max[dst] = group_max[dst].max(c[i]);
    }
    let mut a = Array1::zeros(e);
    let mut group_sum = vec![0.0; n];
    for (i, &dst) in plan.dst_rows.iter().enumerate() {
        a[i] = (c[i] - group_max[dst]).exp();
        group_sum[dst] += a[i];
    }
    for (i, &dst) in plan.dst_rows.iter().enumerate() {
        a[i] /= group_sum[dst];
    }

    let mut agg = Array2::zeros((n, d));
    for (i, &dst) in plan.dst_rows.iter().enumerate() {
        agg.row_mut(dst).scaled_add(a[i], &m.row(i));
    }
    let h_hat = rows_scale(&agg.dot(&lp.w_agg.t()), &plan.inv_sqrt_indeg);

    let mut h_prev = Array2::zeros((n, d));
    for (j, p) in plan.prev_row_of_dst.iter().enumerate() {
        if let Some(p) = p {
            h_prev.row_mut(j).assign(&prev.row(*p));
        }
    }
    let gi = h_hat.dot(&lp.gru_w_ih.t()) + &lp.gru_b_ih;
    let gh = h_prev.dot(&lp.gru_w_hh.t()) + &lp.gru_b_hh;
    let r = (&gi.slice(s![.., ..d]) + &gh.slice(s![.., ..d])).mapv(sigmoid);
    let zg = (&gi.slice(s![.., d..2 * d]) + &gh.slice(s![.., d..2 * d])).mapv(sigmoid);
    let ng = (&gi.slice(s![.., 2 * d..]) + &(&r * &gh.slice(s![.., 2 * d..]))).mapv(f64::tanh);
    let out = &ng * &zg.mapv(|v| 1.0 - v) + &zg * &h_prev;

    LayerCache {
        x_src,
        hrt,
        z,
        gu,
        gf,
        cin,
        hc,
        m,
        att_pre,
        att_lr,
        c,
        a,
        agg,
        h_hat,
        h_prev,
        gh,
        r,
        zg,
        ng,
        out,
    }
}

fn sum_rows(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}

fn outer(a: &Array1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    a.view().insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

/// Returns (d_prev, d_hrt per edge, d_hq).
fn layer_backward(
    lp: &LayerParams,
    plan: &LayerPlan,
    cache: &LayerCache,
    d_out: &Array2<f64>,
    n_prev: usize,
    hq: ArrayView1<f64>,
    qtr: bool,
    g: &mut LayerParams,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = d_out.ncols();

    // State GRU.
    let dz = d_out * &(&cache.h_prev - &cache.ng);
    let dn = d_out * &cache.zg.mapv(|v| 1.0 - v);
    let mut d_hprev = d_out * &cache.zg;
    let dn_pre = dn * cache.ng.mapv(|v| 1.0 - v * v);
    let gh_n = cache.gh.slice(s![.., 2 * d..]);
    let dr_pre = &dn_pre * &gh_n * &cache.r.mapv(|v| v * (1.0 - v));
    let dz_pre = dz * cache.zg.mapv(|v| v * (1.0 - v));
    let d_gi = concatenate![Axis(1), dr_pre, dz_pre, dn_pre];
    let d_gh = concatenate![Axis(1), dr_pre, dz_pre, &dn_pre * &cache.r];
    g.gru_w_ih += &d_gi.t().dot(&cache.h_hat);
    g.gru_b_ih += &sum_rows(&d_gi);
    g.gru_w_hh += &d_gh.t().dot(&cache.h_prev);
    g.gru_b_hh += &sum_rows(&d_gh);
    let d_hhat = d_gi.dot(&lp.gru_w_ih);
    d_hprev += &d_gh.dot(&lp.gru_w_hh);

    // Scaling and aggregation map.
    let d_htilde = rows_scale(&d_hhat, &plan.inv_sqrt_indeg);
    g.w_agg += &d_htilde.t().dot(&cache.agg);
    let d_agg = d_htilde.dot(&lp.w_agg);

    // Weighted sum and per-destination softmax.
    let e = plan.src_rows.len();
    let mut d_m = Array2::zeros((e, d));
    let mut d_a = Array1::zeros(e);
    for (i, &dst) in plan.dst_rows.iter().enumerate() {
        let up = d_agg.row(dst);
        d_m.row_mut(i).scaled_add(cache.a[i], &up);
        d_a[i] = up.dot(&cache.m.row(i));
    }
    let mut weighted = vec![0.0; plan.prev_row_of_dst.len()];
    for (i, &dst) in plan.dst_rows.iter().enumerate() {
        weighted[dst] += cache.a[i] * d_a[i];
    }
    let d_logit = Array1::from_shape_fn(e, |i| {
        let dc = cache.a[i] * (d_a[i] - weighted[plan.dst_rows[i]]);
        dc * cache.c[i] * (1.0 - cache.c[i])
    });

    // Attention projections.
    g.w_att += &cache.att_lr.t().dot(&d_logit);
    let d_att_pre = outer(&d_logit, lp.w_att.view()) * cache.att_pre.mapv(leaky_relu_grad);
    g.w_src += &d_att_pre.t().dot(&cache.x_src);
    g.w_rel += &d_att_pre.t().dot(&cache.hrt);
    let s_att = sum_rows(&d_att_pre);
    g.w_query += &outer(&s_att, hq);
    let mut d_x = d_att_pre.dot(&lp.w_src);
    let mut d_hrt = d_att_pre.dot(&lp.w_rel);
    let mut d_hq = lp.w_query.t().dot(&s_att);

    // Message cell.
    if qtr {
        let d_gu = &d_m * &(&cache.hc - &cache.x_src);
        d_x += &(&d_m * &cache.gu.mapv(|v| 1.0 - v));
        let d_hc_pre = &d_m * &cache.gu * cache.hc.mapv(|v| 1.0 - v * v);
        g.w_cand += &d_hc_pre.t().dot(&cache.cin);
        g.b_cand += &sum_rows(&d_hc_pre);
        let d_cin = d_hc_pre.dot(&lp.w_cand);
        d_hrt += &d_cin;
        let d_gf = &d_cin * &cache.x_src;
        d_x += &(&d_cin * &cache.gf);
        let d_gu_pre = d_gu * cache.gu.mapv(|v| v * (1.0 - v));
        let d_gf_pre = d_gf * cache.gf.mapv(|v| v * (1.0 - v));
        g.w_update += &d_gu_pre.t().dot(&cache.z);
        g.b_update += &sum_rows(&d_gu_pre);
        g.w_forget += &d_gf_pre.t().dot(&cache.z);
        g.b_forget += &sum_rows(&d_gf_pre);
        let d_z = d_gu_pre.dot(&lp.w_update) + d_gf_pre.dot(&lp.w_forget);
        d_x += &d_z.slice(s![.., ..d]);
        d_hrt += &d_z.slice(s![.., d..2 * d]);
        d_hq += &d_z.slice(s![.., 2 * d..]).sum_axis(Axis(0));
    } else {
        d_x += &d_m;
        d_hrt += &d_m;
    }

    let mut d_prev = Array2::zeros((n_prev, d));
    for (i, &src) in plan.src_rows.iter().enumerate() {
        let mut row = d_prev.row_mut(src);
        row += &d_x.row(i);
    }
    for (j, p) in plan.prev_row_of_dst.iter().enumerate() {
        if let Some(p) = p {
            let mut row = d_prev.row_mut(*p);
            row += &d_hprev.row(j);
        }
    }
    (d_prev, d_hrt, d_hq)
}

/// Forward pass with every intermediate retained.
struct Forward {
    plan: Plan,
    tr: TrBatch,
    caches: Vec<LayerCache>,
    /// Row counts of each layer's entity set, starting with layer 0.
    set_sizes: Vec<usize>,
}

impl Forward {
    fn final_states(&self) -> Option<&Array2<f64>> {
        self.caches.last().map(|c| &c.out)
    }
}

/// Stateless encoder bound to a parameter set and a time table.
#[derive(Clone, Copy)]
pub struct Encoder<'a> {
    pub params: &'a ModelParams,
    pub time: &'a TimeEncodingTable,
    pub ablation: Ablation,
}

/// Loss and the corresponding parameter gradient for one query.
pub struct LossGrad {
    pub loss: f64,
    pub grads: ModelParams,
}

impl<'a> Encoder<'a> {
    pub fn new(params: &'a ModelParams, time: &'a TimeEncodingTable, ablation: Ablation) -> Self {
        Self {
            params,
            time,
            ablation,
        }
    }

    fn use_ffn(&self) -> bool {
        self.ablation != Ablation::NoTime
    }

    fn use_qtr(&self) -> bool {
        self.ablation != Ablation::NoQtr
    }

    fn check(&self, g: &TcrDigraph, q: &QueryContext) -> Result<()> {
        if g.num_layers() > self.params.layers.len() {
            return Err(Error::Shape(format!(
                "digraph has {} layers but the model has {}",
                g.num_layers(),
                self.params.layers.len()
            )));
        }
        if g.source != q.entity || g.query_time != q.time {
            return Err(Error::Shape("digraph was built for a different query".into()));
        }
        Ok(())
    }

    fn forward(&self, g: &TcrDigraph, q: &QueryContext) -> Result<Forward> {
        self.check(g, q)?;
        let d = self.params.dims.embed_dim;
        let plan = plan(g, q);
        let tr = TrBatch::forward(self.params, self.time, &plan.pairs, self.use_ffn())?;
        let mut caches: Vec<LayerCache> = Vec::with_capacity(plan.layers.len());
        let mut set_sizes = vec![1];
        let initial = Array2::zeros((1, d));
        for (l, lplan) in plan.layers.iter().enumerate() {
            let prev = caches.last().map_or(&initial, |c| &c.out);
            let cache = layer_forward(
                &self.params.layers[l],
                lplan,
                prev,
                &tr.out,
                tr.out.row(0),
                self.use_qtr(),
            );
            set_sizes.push(cache.out.nrows());
            caches.push(cache);
        }
        Ok(Forward {
            plan,
            tr,
            caches,
            set_sizes,
        })
    }

    /// Encodes the digraph, returning final states and per-edge attention.
    pub fn encode(&self, g: &TcrDigraph, q: &QueryContext) -> Result<Encoding> {
        let d = self.params.dims.embed_dim;
        if g.layers.is_empty() {
            return Ok(Encoding {
                states: StateMap::empty(d),
                layer_states: vec![],
                attention: vec![],
                gate_bounds: (f64::NAN, f64::NAN),
            });
        }
        let fwd = self.forward(g, q)?;
        let mut layer_states = vec![StateMap {
            entities: g.entity_sets[0].clone(),
            states: Array2::zeros((1, d)),
        }];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (l, c) in fwd.caches.iter().enumerate() {
            layer_states.push(StateMap {
                entities: g.entity_sets[l + 1].clone(),
                states: c.out.clone(),
            });
            for gate in [&c.gu, &c.gf, &c.r, &c.zg] {
                for &v in gate.iter() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        let attention = fwd.caches.iter().map(|c| c.a.to_vec()).collect();
        Ok(Encoding {
            states: layer_states.last().unwrap().clone(),
            layer_states,
            attention,
            gate_bounds: (lo, hi),
        })
    }

    /// Multi-class log-loss against `gold` over `num_entities` and its gradient.
    pub fn loss_and_grad(
        &self,
        g: &TcrDigraph,
        q: &QueryContext,
        gold: EntityId,
        num_entities: usize,
    ) -> Result<LossGrad> {
        if gold as usize >= num_entities {
            return Err(Error::OutOfRange {
                what: "gold entity",
                value: gold as usize,
                limit: num_entities,
            });
        }
        let mut grads = self.params.zeros_like();
        let fwd = self.forward(g, q)?;
        let Some(states) = fwd.final_states() else {
            return Ok(LossGrad {
                loss: (num_entities as f64).ln(),
                grads,
            });
        };
        let finals = g.final_entities();
        let scores = states.dot(&self.params.w_out);
        let absent = num_entities - finals.len();
        let lse = log_sum_exp_with_zeros(scores.view(), absent);
        let gold_row = finals.binary_search(&gold).ok();
        let gold_score = gold_row.map_or(0.0, |i| scores[i]);
        let loss = lse - gold_score;

        let mut d_scores = scores.mapv(|s| (s - lse).exp());
        if let Some(i) = gold_row {
            d_scores[i] -= 1.0;
        }
        grads.w_out += &states.t().dot(&d_scores);
        let mut d_states = outer(&d_scores, self.params.w_out.view());

        let mut d_pairs = Array2::zeros(fwd.tr.out.dim());
        let hq = fwd.tr.out.row(0);
        for l in (0..fwd.caches.len()).rev() {
            let lplan = &fwd.plan.layers[l];
            let (d_prev, d_hrt, d_hq) = layer_backward(
                &self.params.layers[l],
                lplan,
                &fwd.caches[l],
                &d_states,
                fwd.set_sizes[l],
                hq,
                self.use_qtr(),
                &mut grads.layers[l],
            );
            for (i, &p) in lplan.pair_idx.iter().enumerate() {
                let mut row = d_pairs.row_mut(p);
                row += &d_hrt.row(i);
            }
            let mut row = d_pairs.row_mut(0);
            row += &d_hq;
            d_states = d_prev;
        }
        fwd.tr.backward(self.params, &d_pairs, &mut grads);
        Ok(LossGrad { loss, grads })
    }

    /// Loss only (no gradient bookkeeping beyond the forward pass).
    pub fn loss(&self, g: &TcrDigraph, q: &QueryContext, gold: EntityId, num_entities: usize) -> Result<f64> {
        let enc = self.encode(g, q)?;
        let scores = crate::scorer::score_entities(&enc.states, &self.params.w_out, num_entities);
        crate::scorer::loss(scores.view(), gold)
    }
}
