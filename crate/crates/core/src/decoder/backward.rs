use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{DecoderExample, DecoderParams, Tape};
use crate::dsl::{ConstToken, OpToken, SPECIAL_TOKENS};

/// `target += a b^T`.
fn add_outer(target: &mut Array2<f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
    for (mut row, &ai) in target.rows_mut().into_iter().zip(a) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

struct AttentionGrad {
    query: Array1<f64>,
    kbar: Array1<f64>,
    keys: Option<Array2<f64>>,
}

fn attend_backward(
    query: &Array1<f64>,
    keys: ArrayView2<'_, f64>,
    weights: &Array2<f64>,
    dist: &Array1<f64>,
    dctx: ArrayView1<'_, f64>,
    want_keys: bool,
) -> AttentionGrad {
    let da = keys.dot(&dctx);
    let mean = dist.dot(&da);
    let ds = dist * &(da - mean);
    let kbar = keys.t().dot(&ds);
    let dquery = weights.dot(&kbar);
    let dkeys = want_keys.then(|| {
        let mut dk = Array2::zeros(keys.raw_dim());
        add_outer(&mut dk, dist.view(), dctx);
        let projected = weights.t().dot(query);
        add_outer(&mut dk, ds.view(), projected.view());
        dk
    });
    AttentionGrad {
        query: dquery,
        kbar,
        keys: dkeys,
    }
}

pub(super) fn backward(p: &DecoderParams, ex: &DecoderExample, tape: &Tape) -> DecoderParams {
    let d = p.dim();
    let n = tape.heads.len();
    let mut g = p.zeros_like();
    let mut dcands = Array2::<f64>::zeros(tape.candidates.raw_dim());
    let mut dh_ext = vec![Array1::<f64>::zeros(d); n];
    let inputs = ex.inputs.inputs.view();

    for (k, head) in tape.heads.iter().enumerate() {
        let y = ex.gold[k + 1];
        let mut dlogits = head.probs.clone();
        dlogits[y] -= 1.0;
        dlogits /= n as f64;

        add_outer(&mut dcands, dlogits.view(), head.q.view());
        let dq = tape.candidates.t().dot(&dlogits);
        let u2 = head.u.slice(s![d..2 * d]);
        let du = concatenate(Axis(0), &[dq.view(), (&dq * &head.reason_ctx).view()]).expect("1-d");
        let dreason = &dq * &u2;

        add_outer(&mut g.w_reason, head.context.view(), du.view());
        let dc = p.w_reason.dot(&du);
        add_outer(&mut g.w_context, dc.view(), head.mixed.view());
        let dm = p.w_context.t().dot(&dc);

        let gi = attend_backward(&head.query, inputs, &p.att_input, &head.input_dist, dm.slice(s![0..d]), false);
        add_outer(&mut g.att_input, head.query.view(), gi.kbar.view());
        let gh = attend_backward(
            &head.query,
            head.history.view(),
            &p.att_history,
            &head.hist_dist,
            dm.slice(s![d..2 * d]),
            true,
        );
        add_outer(&mut g.att_history, head.query.view(), gh.kbar.view());
        let gr = attend_backward(&head.query, inputs, &p.att_reason, &head.reason_dist, dreason.view(), false);
        add_outer(&mut g.att_reason, head.query.view(), gr.kbar.view());

        for (j, dk) in gh.keys.expect("requested").rows().into_iter().enumerate() {
            dh_ext[j] += &dk;
        }
        let dh = &dh_ext[k] + &dm.slice(s![2 * d..3 * d]) + &gi.query + &gh.query + &gr.query;
        dh_ext[k] = dh;
    }

    let mut dh_next = Array1::<f64>::zeros(d);
    let mut dc_next = Array1::<f64>::zeros(d);
    for s_idx in (0..tape.lstm.len()).rev() {
        let st = &tape.lstm[s_idx];
        let dh = &dh_ext[s_idx] + &dh_next;
        let d_o = &dh * &st.tanh_c;
        let dc = &dc_next + &(&dh * &st.o * &st.tanh_c.mapv(|t| 1.0 - t * t));
        let di = &dc * &st.g;
        let dg = &dc * &st.i;
        let df = &dc * &st.c_prev;
        dc_next = &dc * &st.f;

        let mut dz = Array1::<f64>::zeros(4 * d);
        dz.slice_mut(s![0..d]).assign(&(&di * &st.i.mapv(|x| x * (1.0 - x))));
        dz.slice_mut(s![d..2 * d]).assign(&(&df * &st.f.mapv(|x| x * (1.0 - x))));
        dz.slice_mut(s![2 * d..3 * d]).assign(&(&dg * &st.g.mapv(|x| 1.0 - x * x)));
        dz.slice_mut(s![3 * d..4 * d]).assign(&(&d_o * &st.o.mapv(|x| x * (1.0 - x))));

        add_outer(&mut g.lstm_input, dz.view(), st.x.view());
        add_outer(&mut g.lstm_hidden, dz.view(), st.h_prev.view());
        g.lstm_bias += &dz;

        let mut dx = p.lstm_input.t().dot(&dz);
        if let Some(mask) = &tape.dropout[s_idx] {
            dx *= mask;
        }
        let mut row = dcands.row_mut(ex.gold[s_idx]);
        row += &dx;
        dh_next = p.lstm_hidden.t().dot(&dz);
    }

    let ops = OpToken::ALL.len();
    let consts = ops + ConstToken::ALL.len();
    g.op_embeddings += &dcands.slice(s![0..ops, ..]);
    g.const_embeddings += &dcands.slice(s![ops..consts, ..]);
    g.step_embeddings += &dcands.slice(s![consts..SPECIAL_TOKENS, ..]);
    g
}
