//! Batched GRU over variable-length row sequences.

use std::rc::Rc;

use rand::Rng;

use crate::tensor::{Graph, Mat, NodeId, ParamId, ParamStore, RowMix};

/// Gate columns are laid out `[update | reset | candidate]`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub input: ParamId,
    pub input_bias: ParamId,
    pub recurrent: ParamId,
    pub recurrent_bias: ParamId,
    pub hidden: usize,
}

pub struct GruOutput {
    /// One row per sequence element, sequences concatenated in the given order.
    pub states: NodeId,
    /// Last state of each sequence (zero row for an empty sequence).
    pub finals: NodeId,
}

impl GruParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        GruParams {
            input: store.glorot(&format!("{prefix}.input"), input, 3 * hidden, rng),
            input_bias: store.zeros(&format!("{prefix}.input_bias"), 1, 3 * hidden),
            recurrent: store.glorot(&format!("{prefix}.recurrent"), hidden, 3 * hidden, rng),
            recurrent_bias: store.zeros(&format!("{prefix}.recurrent_bias"), 1, 3 * hidden),
            hidden,
        }
    }

    /// Runs the cell over each sequence of row indices into `x`, starting from a zero state.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: NodeId, seqs: &[Vec<usize>]) -> GruOutput {
        let h = self.hidden;
        let wi = g.param(store, self.input);
        let bi = g.param(store, self.input_bias);
        let wr = g.param(store, self.recurrent);
        let br = g.param(store, self.recurrent_bias);
        let xw = g.affine(x, wi, bi);

        // Longest first, so the sequences still running at step t are a prefix.
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by_key(|&s| std::cmp::Reverse(seqs[s].len()));
        let max_len = order.first().map_or(0, |&s| seqs[s].len());

        let mut steps = Vec::with_capacity(max_len);
        let mut step_offset = Vec::with_capacity(max_len);
        let mut total = 0;
        let mut prev: Option<NodeId> = None;
        for t in 0..max_len {
            let active = order.iter().take_while(|&&s| seqs[s].len() > t).count();
            let idx: Vec<usize> = order[..active].iter().map(|&s| seqs[s][t]).collect();
            let xt = g.rows(xw, Rc::new(RowMix::gather(&idx)));
            let hp = match prev {
                None => g.constant(Mat::zeros((active, h))),
                Some(p) if g.value(p).nrows() == active => p,
                Some(p) => g.rows(p, Rc::new(RowMix::gather(&(0..active).collect::<Vec<_>>()))),
            };
            let rec = g.affine(hp, wr, br);
            let xz = g.slice_cols(xt, 0, h);
            let xr = g.slice_cols(xt, h, 2 * h);
            let xn = g.slice_cols(xt, 2 * h, 3 * h);
            let hz = g.slice_cols(rec, 0, h);
            let hr = g.slice_cols(rec, h, 2 * h);
            let hn = g.slice_cols(rec, 2 * h, 3 * h);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let rn = g.mul(r, hn);
            let n = g.add(xn, rn);
            let n = g.tanh(n);
            let next = g.blend(z, hp, n);
            steps.push(next);
            step_offset.push(total);
            total += active;
            prev = Some(next);
        }

        // rank of each sequence in `order`
        let mut rank = vec![0; seqs.len()];
        for (r, &s) in order.iter().enumerate() {
            rank[s] = r;
        }
        let all = if steps.is_empty() {
            g.constant(Mat::zeros((0, h)))
        } else {
            g.concat_rows(&steps)
        };
        let state_rows: Vec<usize> = seqs
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.len()).map(move |t| (s, t)))
            .map(|(s, t)| step_offset[t] + rank[s])
            .collect();
        let final_rows: Vec<Option<usize>> = seqs
            .iter()
            .enumerate()
            .map(|(s, seq)| seq.len().checked_sub(1).map(|t| step_offset[t] + rank[s]))
            .collect();
        let states = g.rows(all, Rc::new(RowMix::gather(&state_rows)));
        let finals = g.rows(all, Rc::new(RowMix::gather_opt(&final_rows)));
        GruOutput { states, finals }
    }
}
