use crate::error::{Error, Result};
use crate::model::layers::{gelu, gelu_grad, layer_norm_bwd, layer_norm_fwd, linear_pre_ln, softmax, LnCache};
use crate::model::{BlockParams, Params};
use crate::store::FeatureRecord;
use crate::tensor::{gemm, matmul, Mat, View, ViewMut};

/// `batch x C` class scores.
pub type Logits = Mat;

struct BlockTrace {
    ln1: LnCache,
    qkv: Mat,
    /// Attention probabilities, head `h` in rows `[h*n, (h+1)*n)`.
    probs: Mat,
    attn: Mat,
    ln2: LnCache,
    fc1: Mat,
    act: Mat,
}

/// Every intermediate of one record's forward pass.
pub struct ForwardTrace {
    tokens: Mat,
    proj_ln: LnCache,
    blocks: Vec<BlockTrace>,
    final_ln: LnCache,
    logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Outputs of every LayerNorm site, in network order.
    pub fn layer_norm_outputs(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("proj.ln".to_string(), &self.proj_ln.out)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1"), &b.ln1.out));
            out.push((format!("blocks.{i}.ln2"), &b.ln2.out));
        }
        out.push(("norm".to_string(), &self.final_ln.out));
        out
    }

    /// Attention probabilities of block `i` (`heads * n` rows of length `n`).
    pub fn attention(&self, block: usize) -> &Mat {
        &self.blocks[block].probs
    }
}

/// Stack a record into `(1 + h*w) x d` tokens: offline CLS first, then the
/// grid in row-major order.
pub fn record_tokens(rec: &FeatureRecord) -> Mat {
    let d = rec.grid.d();
    let n = rec.grid.tokens() + 1;
    let mut data = Vec::with_capacity(n * d);
    data.extend_from_slice(&rec.cls);
    data.extend_from_slice(rec.grid.values());
    Mat::from_vec(n, d, data)
}

/// One pre-norm block over `x`, which stacks whole records of `seq` tokens
/// each. Token-wise layers run on all rows at once; attention stays within a
/// record. Probabilities are laid out record-major, then head.
fn block_forward(x: &mut Mat, b: &BlockParams, heads: usize, seq: usize) -> BlockTrace {
    let (rows, m) = x.shape();
    let n = seq;
    let records = rows / n;
    let dh = m / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let ln1 = layer_norm_fwd(x, b.ln1_gain.as_slice(), b.ln1_bias.as_slice());
    let mut qkv = matmul(View::of(&ln1.out), View::of(&b.qkv_weight));
    qkv.add_row_vector(b.qkv_bias.as_slice());

    let mut probs = Mat::zeros(records * heads * n, n);
    let mut attn = Mat::zeros(rows, m);
    let mut scores = Mat::zeros(n, n);
    for g in 0..records {
        let qkv_rows = &qkv.as_slice()[g * n * 3 * m..(g + 1) * n * 3 * m];
        let head_view = |c0: usize| View {
            data: &qkv_rows[c0..],
            rows: n,
            cols: dh,
            row_stride: 3 * m,
            col_stride: 1,
        };
        for h in 0..heads {
            let (q, k, v) = (head_view(h * dh), head_view(m + h * dh), head_view(2 * m + h * dh));
            gemm(scale, q, k.t(), 0.0, ViewMut::of(&mut scores));
            let base = (g * heads + h) * n;
            for r in 0..n {
                let p = softmax(scores.row(r));
                probs.row_mut(base + r).copy_from_slice(&p);
            }
            let p_h = View {
                data: &probs.as_slice()[base * n..(base + n) * n],
                rows: n,
                cols: n,
                row_stride: n,
                col_stride: 1,
            };
            let out = ViewMut {
                data: &mut attn.as_mut_slice()[g * n * m + h * dh..],
                rows: n,
                cols: dh,
                row_stride: m,
            };
            gemm(1.0, p_h, v, 0.0, out);
        }
    }
    gemm(1.0, View::of(&attn), View::of(&b.attn_out_weight), 1.0, ViewMut::of(x));
    x.add_row_vector(b.attn_out_bias.as_slice());

    let ln2 = layer_norm_fwd(x, b.ln2_gain.as_slice(), b.ln2_bias.as_slice());
    let mut fc1 = matmul(View::of(&ln2.out), View::of(&b.fc1_weight));
    fc1.add_row_vector(b.fc1_bias.as_slice());
    let mut act = Mat::zeros_like(&fc1);
    for (a, z) in act.as_mut_slice().iter_mut().zip(fc1.as_slice()) {
        *a = gelu(*z);
    }
    gemm(1.0, View::of(&act), View::of(&b.fc2_weight), 1.0, ViewMut::of(x));
    x.add_row_vector(b.fc2_bias.as_slice());

    BlockTrace {
        ln1,
        qkv,
        probs,
        attn,
        ln2,
        fc1,
        act,
    }
}

/// Projected, normalized tokens with the learned CLS and position
/// embeddings added, for stacked records of `seq` tokens each.
fn embed(params: &Params, tokens: &Mat, seq: usize) -> (LnCache, Mat) {
    let c = &params.classifier;
    let z = linear_pre_ln(tokens, &params.proj);
    let proj_ln = layer_norm_fwd(&z, params.proj.ln_gain.as_slice(), params.proj.ln_bias.as_slice());
    let mut x = proj_ln.out.clone();
    let width = x.cols();
    for rec_rows in x.as_mut_slice().chunks_exact_mut(seq * width) {
        for (o, l) in rec_rows[..width].iter_mut().zip(c.learned_cls.as_slice()) {
            *o += l;
        }
        for (o, e) in rec_rows.iter_mut().zip(c.pos_embed.as_slice()) {
            *o += e;
        }
    }
    (proj_ln, x)
}

/// Final LayerNorm on each record's CLS row, then the linear head.
fn head(params: &Params, cls_rows: &Mat) -> (LnCache, Mat) {
    let c = &params.classifier;
    let final_ln = layer_norm_fwd(cls_rows, c.norm_gain.as_slice(), c.norm_bias.as_slice());
    let mut logits = matmul(View::of(&final_ln.out), View::of(&c.head_weight));
    logits.add_row_vector(c.head_bias.as_slice());
    (final_ln, logits)
}

/// Forward one record, keeping everything backward needs.
pub fn forward_record(params: &Params, rec: &FeatureRecord) -> Result<ForwardTrace> {
    params.check_input(rec.shape())?;
    let seq = params.dims.seq_len();
    let tokens = record_tokens(rec);
    let (proj_ln, mut x) = embed(params, &tokens, seq);
    let blocks = params
        .classifier
        .blocks
        .iter()
        .map(|b| block_forward(&mut x, b, params.config.heads, seq))
        .collect();
    let cls_row = Mat::from_vec(1, x.cols(), x.row(0).to_vec());
    let (final_ln, logits) = head(params, &cls_row);
    Ok(ForwardTrace {
        tokens,
        proj_ln,
        blocks,
        final_ln,
        logits: logits.row(0).to_vec(),
    })
}

/// Upper bound on stacked token rows per pass through the token-wise layers.
const MAX_STACKED_ROWS: usize = 256;

/// Logits for a batch, one row per record in input order. Records go through
/// the token-wise layers together, in even sub-batches of at most
/// `MAX_STACKED_ROWS` tokens.
pub fn forward(params: &Params, batch: &[FeatureRecord]) -> Result<Logits> {
    for rec in batch {
        params.check_input(rec.shape())?;
    }
    let seq = params.dims.seq_len();
    let per_chunk = (MAX_STACKED_ROWS / seq).max(1);
    let chunks = batch.len().div_ceil(per_chunk).max(1);
    let chunk_len = batch.len().div_ceil(chunks).max(1);
    let mut logits = Mat::zeros(batch.len(), params.dims.classes);
    for (i, chunk) in batch.chunks(chunk_len).enumerate() {
        let out = forward_stacked(params, chunk);
        let at = i * chunk_len * params.dims.classes;
        logits.as_mut_slice()[at..at + out.len()].copy_from_slice(out.as_slice());
    }
    Ok(logits)
}

fn forward_stacked(params: &Params, batch: &[FeatureRecord]) -> Mat {
    let seq = params.dims.seq_len();
    let d = params.dims.d;
    let mut data = Vec::with_capacity(batch.len() * seq * d);
    for rec in batch {
        data.extend_from_slice(&rec.cls);
        data.extend_from_slice(rec.grid.values());
    }
    let tokens = Mat::from_vec(batch.len() * seq, d, data);
    let (_, mut x) = embed(params, &tokens, seq);
    drop(tokens);
    for b in &params.classifier.blocks {
        block_forward(&mut x, b, params.config.heads, seq);
    }
    let width = x.cols();
    let mut cls_rows = Mat::zeros(batch.len(), width);
    for i in 0..batch.len() {
        cls_rows.row_mut(i).copy_from_slice(x.row(i * seq));
    }
    drop(x);
    head(params, &cls_rows).1
}

/// Mean cross-entropy over rows and its gradient `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: &Logits, labels: &[u32]) -> Result<(f64, Mat)> {
    let (b, classes) = logits.shape();
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            b
        )));
    }
    let mut grad = Mat::zeros(b, classes);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (loss, g) = row_cross_entropy(logits.row(i), y, b)?;
        total += loss;
        grad.row_mut(i).copy_from_slice(&g);
    }
    Ok((total / b as f64, grad))
}

/// Loss of one row (not divided by batch) and its gradient scaled by `1/batch`.
fn row_cross_entropy(row: &[f64], label: u32, batch: usize) -> Result<(f64, Vec<f64>)> {
    let y = label as usize;
    if y >= row.len() {
        return Err(Error::IndexError {
            index: y,
            len: row.len(),
        });
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut g = softmax(row);
    g[y] -= 1.0;
    g.iter_mut().for_each(|v| *v /= batch as f64);
    Ok((lse - row[y], g))
}

fn block_backward(dx: &mut Mat, b: &BlockParams, t: &BlockTrace, g: &mut BlockParams, heads: usize) {
    let (n, m) = dx.shape();
    let dh = m / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP branch: x += fc2(gelu(fc1(ln2(x))))
    gemm(1.0, View::of(&t.act).t(), View::of(dx), 1.0, ViewMut::of(&mut g.fc2_weight));
    dx.sum_rows_into(g.fc2_bias.as_mut_slice());
    let mut dact = matmul(View::of(dx), View::of(&b.fc2_weight).t());
    for (d, z) in dact.as_mut_slice().iter_mut().zip(t.fc1.as_slice()) {
        *d *= gelu_grad(*z);
    }
    gemm(1.0, View::of(&t.ln2.out).t(), View::of(&dact), 1.0, ViewMut::of(&mut g.fc1_weight));
    dact.sum_rows_into(g.fc1_bias.as_mut_slice());
    let dln2 = matmul(View::of(&dact), View::of(&b.fc1_weight).t());
    let dres = layer_norm_bwd(
        &dln2,
        &t.ln2,
        b.ln2_gain.as_slice(),
        g.ln2_gain.as_mut_slice(),
        g.ln2_bias.as_mut_slice(),
    );
    dx.add_assign(&dres);

    // Attention branch: x += out(attn(ln1(x)))
    gemm(1.0, View::of(&t.attn).t(), View::of(dx), 1.0, ViewMut::of(&mut g.attn_out_weight));
    dx.sum_rows_into(g.attn_out_bias.as_mut_slice());
    let dattn = matmul(View::of(dx), View::of(&b.attn_out_weight).t());
    let mut dqkv = Mat::zeros(n, 3 * m);
    let mut dp = Mat::zeros(n, n);
    for h in 0..heads {
        let q = View::cols_of(&t.qkv, h * dh, dh);
        let k = View::cols_of(&t.qkv, m + h * dh, dh);
        let v = View::cols_of(&t.qkv, 2 * m + h * dh, dh);
        let p_h = View {
            data: &t.probs.as_slice()[h * n * n..(h + 1) * n * n],
            rows: n,
            cols: n,
            row_stride: n,
            col_stride: 1,
        };
        let do_h = View::cols_of(&dattn, h * dh, dh);
        // dV = P^T dO
        gemm(1.0, p_h.t(), do_h, 0.0, ViewMut::cols_of(&mut dqkv, 2 * m + h * dh, dh));
        // dP = dO V^T
        gemm(1.0, do_h, v.t(), 0.0, ViewMut::of(&mut dp));
        // dS = P * (dP - rowsum(dP * P)), folded with the score scale
        for r in 0..n {
            let prow = &p_h.data[r * n..(r + 1) * n];
            let drow = dp.row_mut(r);
            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (dv, pv) in drow.iter_mut().zip(prow) {
                *dv = pv * (*dv - dot) * scale;
            }
        }
        gemm(1.0, View::of(&dp), k, 0.0, ViewMut::cols_of(&mut dqkv, h * dh, dh));
        gemm(1.0, View::of(&dp).t(), q, 0.0, ViewMut::cols_of(&mut dqkv, m + h * dh, dh));
    }
    gemm(1.0, View::of(&t.ln1.out).t(), View::of(&dqkv), 1.0, ViewMut::of(&mut g.qkv_weight));
    dqkv.sum_rows_into(g.qkv_bias.as_mut_slice());
    let dln1 = matmul(View::of(&dqkv), View::of(&b.qkv_weight).t());
    let dres = layer_norm_bwd(
        &dln1,
        &t.ln1,
        b.ln1_gain.as_slice(),
        g.ln1_gain.as_mut_slice(),
        g.ln1_bias.as_mut_slice(),
    );
    dx.add_assign(&dres);
}

/// Accumulate the gradient of one record into `grads`, given `dlogits`.
fn record_backward(params: &Params, trace: &ForwardTrace, dlogits: &[f64], grads: &mut Params) {
    let c = &params.classifier;
    let m = params.config.embed_dim;
    let n = params.dims.seq_len();
    let gc = &mut grads.classifier;

    let y = trace.final_ln.out.row(0);
    let mut dy = Mat::zeros(1, m);
    for (k, &yk) in y.iter().enumerate() {
        let wrow = c.head_weight.row(k);
        let grow = gc.head_weight.row_mut(k);
        let mut acc = 0.0;
        for ((gw, w), dl) in grow.iter_mut().zip(wrow).zip(dlogits) {
            *gw += yk * dl;
            acc += w * dl;
        }
        dy.set(0, k, acc);
    }
    for (gb, dl) in gc.head_bias.as_mut_slice().iter_mut().zip(dlogits) {
        *gb += dl;
    }
    let dcls = layer_norm_bwd(
        &dy,
        &trace.final_ln,
        c.norm_gain.as_slice(),
        gc.norm_gain.as_mut_slice(),
        gc.norm_bias.as_mut_slice(),
    );
    let mut dx = Mat::zeros(n, m);
    dx.row_mut(0).copy_from_slice(dcls.row(0));

    for ((b, t), g) in c
        .blocks
        .iter()
        .zip(&trace.blocks)
        .zip(gc.blocks.iter_mut())
        .rev()
    {
        block_backward(&mut dx, b, t, g, params.config.heads);
    }

    gc.pos_embed.add_assign(&dx);
    for (g, v) in gc.learned_cls.as_mut_slice().iter_mut().zip(dx.row(0)) {
        *g += v;
    }
    let p = &params.proj;
    let gp = &mut grads.proj;
    let dz = layer_norm_bwd(
        &dx,
        &trace.proj_ln,
        p.ln_gain.as_slice(),
        gp.ln_gain.as_mut_slice(),
        gp.ln_bias.as_mut_slice(),
    );
    gemm(1.0, View::of(&trace.tokens).t(), View::of(&dz), 1.0, ViewMut::of(&mut gp.weight));
    dz.sum_rows_into(gp.bias.as_mut_slice());
}

/// Mean cross-entropy over `batch` and exact gradients for every parameter.
/// Records are processed one at a time in batch order.
pub fn backward(params: &Params, batch: &[FeatureRecord], labels: &[u32]) -> Result<(f64, Params)> {
    if batch.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} records but {} labels",
            batch.len(),
            labels.len()
        )));
    }
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for (rec, &y) in batch.iter().zip(labels) {
        let trace = forward_record(params, rec)?;
        let (loss, dlogits) = row_cross_entropy(trace.logits(), y, batch.len())?;
        total += loss;
        record_backward(params, &trace, &dlogits, &mut grads);
    }
    Ok((total / batch.len() as f64, grads))
}
