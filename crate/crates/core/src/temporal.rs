//! Relative-time encoding and temporal-relation fusion.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_grad};
use crate::params::ModelParams;
use crate::store::RelationId;

/// Fixed sinusoidal table: row `pos`, column `2i` = `sin(pos / 10000^(2i/d))`,
/// column `2i+1` = `cos(pos / 10000^(2i/d))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncodingTable {
    table: Array2<f64>,
}

impl TimeEncodingTable {
    pub fn new(len: usize, dim: usize) -> Self {
        let mut table = Array2::zeros((len, dim));
        for pos in 0..len {
            for col in 0..dim {
                let pair = (col / 2) * 2;
                let angle = pos as f64 / 10000f64.powf(pair as f64 / dim as f64);
                table[[pos, col]] = if col % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        Self { table }
    }

    pub fn len(&self) -> usize {
        self.table.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.table.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn row(&self, offset: u32) -> Result<ArrayView1<'_, f64>> {
        if offset as usize >= self.len() {
            return Err(Error::OutOfRange {
                what: "relative time",
                value: offset as usize,
                limit: self.len(),
            });
        }
        Ok(self.table.row(offset as usize))
    }
}

/// Encoding of a relative snapshot offset.
pub fn time_encode(table: &TimeEncodingTable, offset: u32) -> Result<Array1<f64>> {
    table.row(offset).map(|r| r.to_owned())
}

/// `LReLU(W2 LReLU(W1 [h_r, v] + b1) + b2) + h_r` for one relation/offset pair.
pub fn temporal_relation_embed(
    params: &ModelParams,
    table: &TimeEncodingTable,
    relation: RelationId,
    offset: u32,
) -> Result<Array1<f64>> {
    let batch = TrBatch::forward(params, table, &[(relation, offset)], true)?;
    Ok(batch.out.row(0).to_owned())
}

/// Batched temporal-relation embedding with the intermediates kept for backprop.
pub(crate) struct TrBatch {
    relations: Vec<usize>,
    input: Array2<f64>,
    u_pre: Array2<f64>,
    u: Array2<f64>,
    o_pre: Array2<f64>,
    pub out: Array2<f64>,
    use_ffn: bool,
}

impl TrBatch {
    /// With `use_ffn == false` the output is the raw relation embedding.
    pub fn forward(
        params: &ModelParams,
        table: &TimeEncodingTable,
        pairs: &[(RelationId, u32)],
        use_ffn: bool,
    ) -> Result<Self> {
        let num_rel = params.relation_emb.nrows();
        let mut relations = Vec::with_capacity(pairs.len());
        for &(r, _) in pairs {
            if r as usize >= num_rel {
                return Err(Error::OutOfRange {
                    what: "relation id",
                    value: r as usize,
                    limit: num_rel,
                });
            }
            relations.push(r as usize);
        }
        let h_r = params.relation_emb.select(Axis(0), &relations);
        if !use_ffn {
            return Ok(Self {
                relations,
                input: Array2::zeros((0, 0)),
                u_pre: Array2::zeros((0, 0)),
                u: Array2::zeros((0, 0)),
                o_pre: Array2::zeros((0, 0)),
                out: h_r,
                use_ffn,
            });
        }
        if table.dim() != params.dims.time_dim {
            return Err(Error::Shape(format!(
                "time table has {} columns, model expects {}",
                table.dim(),
                params.dims.time_dim
            )));
        }
        let mut v = Array2::zeros((pairs.len(), table.dim()));
        for (i, &(_, t)) in pairs.iter().enumerate() {
            v.row_mut(i).assign(&table.row(t)?);
        }
        let input = concatenate![Axis(1), h_r, v];
        let u_pre = input.dot(&params.tr.w1.t()) + &params.tr.b1;
        let u = u_pre.mapv(leaky_relu);
        let o_pre = u.dot(&params.tr.w2.t()) + &params.tr.b2;
        let out = o_pre.mapv(leaky_relu) + &h_r;
        Ok(Self {
            relations,
            input,
            u_pre,
            u,
            o_pre,
            out,
            use_ffn,
        })
    }

    /// Accumulates parameter gradients for upstream gradient `d_out`.
    pub fn backward(&self, params: &ModelParams, d_out: &Array2<f64>, grads: &mut ModelParams) {
        let d = params.dims.embed_dim;
        let mut d_hr = d_out.clone();
        if self.use_ffn {
            let d_o_pre = d_out * &self.o_pre.mapv(leaky_relu_grad);
            grads.tr.w2 += &d_o_pre.t().dot(&self.u);
            grads.tr.b2 += &d_o_pre.sum_axis(Axis(0));
            let d_u_pre = d_o_pre.dot(&params.tr.w2) * self.u_pre.mapv(leaky_relu_grad);
            grads.tr.w1 += &d_u_pre.t().dot(&self.input);
            grads.tr.b1 += &d_u_pre.sum_axis(Axis(0));
            let d_input = d_u_pre.dot(&params.tr.w1);
            d_hr += &d_input.slice(s![.., ..d]);
        }
        for (i, &r) in self.relations.iter().enumerate() {
            let mut row = grads.relation_emb.row_mut(r);
            row += &d_hr.row(i);
        }
    }
}
