//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so construction order is a valid
//! topological order: `backward` walks the tape in reverse, and the
//! finite-difference replay in `gradcheck` re-evaluates only the nodes
//! downstream of a perturbed parameter.

use super::ops::{self, Aux, Op};
use super::tensor::Tensor;
use super::NnError;

pub type NodeId = usize;

#[derive(Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub aux: Aux,
    pub requires_grad: bool,
    pub is_param: bool,
    pub name: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            aux: Aux::None,
            requires_grad: false,
            is_param: false,
            name: None,
        })
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, value: Tensor, name: impl Into<String>) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            aux: Aux::None,
            requires_grad: true,
            is_param: true,
            name: Some(name.into()),
        })
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id].name.as_deref()
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].is_param)
            .collect()
    }

    /// Batch statistics recorded by a `BatchNormTrain` node, for running-stat
    /// updates after an optimizer step.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id].aux {
            Aux::ChannelStats { mean, var } => Some((mean, var)),
            _ => None,
        }
    }

    /// Count of rows the row-normalization op had to map to a fixed basis
    /// vector because the pre-normalization vector was all zero.
    pub fn degenerate_rows(&self, id: NodeId) -> usize {
        match &self.nodes[id].aux {
            Aux::RowNorms(norms) => norms.iter().filter(|&&n| n == 0.0).count(),
            _ => 0,
        }
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn apply(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId, NnError> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let (value, aux) = ops::eval(&op, &vals)?;
        if !value.all_finite() {
            return Err(NnError::NonFinite(format!("{op:?} produced non-finite values")));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Node {
            op,
            inputs,
            value,
            aux,
            requires_grad,
            is_param: false,
            name: None,
        }))
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::Conv1d, vec![x, w, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::Conv2d, vec![x, w, b])
    }

    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, NnError> {
        self.apply(Op::BatchNormTrain { eps }, vec![x, gamma, beta])
    }

    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: NodeId,
        running_var: NodeId,
        eps: f64,
    ) -> Result<NodeId, NnError> {
        self.apply(
            Op::BatchNormInfer { eps },
            vec![x, gamma, beta, running_mean, running_var],
        )
    }

    pub fn avgpool1d(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::AvgPool1d, vec![x])
    }

    pub fn maxpool1d(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::MaxPool1d, vec![x])
    }

    pub fn maxpool2d(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::MaxPool2d, vec![x])
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::Flatten, vec![x])
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::Dense, vec![x, w, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::Relu, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::Sigmoid, vec![x])
    }

    pub fn row_mean(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::RowMean, vec![x])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::ConcatCols, vec![a, b])
    }

    pub fn slice_col(&mut self, x: NodeId, col: usize) -> Result<NodeId, NnError> {
        self.apply(Op::SliceCol { col }, vec![x])
    }

    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::RowScale, vec![x, s])
    }

    pub fn l2norm_rows(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.apply(Op::L2NormRows, vec![x])
    }

    pub fn supcon_loss(&mut self, z: NodeId, tau: f64, labels: Vec<u8>) -> Result<NodeId, NnError> {
        self.apply(Op::SupConLoss { tau, labels }, vec![z])
    }

    pub fn bce_loss(&mut self, p: NodeId, labels: Vec<f64>) -> Result<NodeId, NnError> {
        self.apply(Op::BceLoss { labels }, vec![p])
    }

    pub fn sse_loss(&mut self, x: NodeId, target: Vec<f64>) -> Result<NodeId, NnError> {
        self.apply(Op::SseLoss { target }, vec![x])
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate in
    /// construction order reversed, which is a topological order of the tape.
    pub fn backward(&mut self, output: NodeId) -> Result<(), NnError> {
        if self.nodes[output].value.len() != 1 {
            return Err(NnError::Usage(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[output].value.shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[output] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[id].clone() else {
                continue;
            };
            let node = &self.nodes[id];
            let vals: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let contribs = ops::backprop(&node.op, &vals, &node.value, &node.aux, &gout, &need)?;
            let input_ids = node.inputs.clone();
            for (k, contrib) in contribs.into_iter().enumerate() {
                let Some(c) = contrib else { continue };
                let slot = &mut self.grads[input_ids[k]];
                match slot {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += v;
                        }
                    }
                    None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Node ids downstream of `leaf` (including it), ascending. Used by the
    /// finite-difference replay to avoid re-running unaffected ops.
    pub(crate) fn affected_from(&self, leaf: NodeId) -> Vec<NodeId> {
        let mut affected = vec![false; self.nodes.len()];
        affected[leaf] = true;
        for id in leaf + 1..self.nodes.len() {
            if self.nodes[id].inputs.iter().any(|&i| affected[i]) {
                affected[id] = true;
            }
        }
        affected
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    /// Re-evaluates `affected` (ascending node ids, starting at a leaf whose
    /// replacement value is `leaf_value`) and returns the scalar at `output`.
    /// The graph itself is not modified.
    pub(crate) fn replay(
        &self,
        affected: &[NodeId],
        leaf_value: &Tensor,
        output: NodeId,
    ) -> Result<f64, NnError> {
        debug_assert_eq!(affected.first(), Some(&affected[0]));
        let mut scratch: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        scratch[affected[0]] = Some(leaf_value.clone());
        for &id in &affected[1..] {
            let node = &self.nodes[id];
            let vals: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|&i| scratch[i].as_ref().unwrap_or(&self.nodes[i].value))
                .collect();
            let (value, _aux) = ops::eval(&node.op, &vals)?;
            scratch[id] = Some(value);
        }
        Ok(scratch[output]
            .as_ref()
            .unwrap_or(&self.nodes[output].value)
            .item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv1d_identity_kernel() {
        // K = 1, single unit kernel, zero bias: output equals input.
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 4, 1], vec![1.0, -2.0, 3.0, 0.5]));
        let w = g.param(t(vec![1, 1, 1], vec![1.0]), "w");
        let b = g.param(t(vec![1], vec![0.0]), "b");
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn conv1d_matches_loop_oracle() {
        // Random small case against a directly coded nested-loop oracle.
        let (l, k, ci, co) = (5usize, 2usize, 2usize, 3usize);
        let xv: Vec<f64> = (0..l * ci).map(|i| (i as f64 * 0.7).sin()).collect();
        let wv: Vec<f64> = (0..k * ci * co).map(|i| (i as f64 * 0.3).cos()).collect();
        let bv: Vec<f64> = (0..co).map(|i| i as f64 * 0.1).collect();

        let mut expected = vec![0.0; (l - k + 1) * co];
        for i in 0..l - k + 1 {
            for c_out in 0..co {
                let mut acc = bv[c_out];
                for kk in 0..k {
                    for c_in in 0..ci {
                        acc += xv[(i + kk) * ci + c_in] * wv[(kk * ci + c_in) * co + c_out];
                    }
                }
                expected[i * co + c_out] = acc;
            }
        }

        let mut g = Graph::new();
        let x = g.constant(t(vec![1, l, ci], xv));
        let w = g.param(t(vec![k, ci, co], wv), "w");
        let b = g.param(t(vec![co], bv), "b");
        let y = g.conv1d(x, w, b).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 4, 4, 2], (0..32).map(|i| i as f64).collect()));
        let w = g.param(Tensor::zeros(vec![3, 3, 2, 4]), "w");
        let b = g.param(t(vec![4], vec![0.5, -1.0, 2.0, 0.0]), "b");
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2, 4]);
        for chunk in g.value(y).data().chunks(4) {
            assert_eq!(chunk, &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let (h, w_, ci, co) = (4usize, 4usize, 2usize, 2usize);
        let xv: Vec<f64> = (0..h * w_ * ci).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let wv: Vec<f64> = (0..9 * ci * co).map(|i| ((i * 5 % 11) as f64) * 0.1 - 0.5).collect();
        let bv = vec![0.25, -0.75];

        let (ho, wo) = (h - 2, w_ - 2);
        let mut expected = vec![0.0; ho * wo * co];
        for i in 0..ho {
            for j in 0..wo {
                for c_out in 0..co {
                    let mut acc = bv[c_out];
                    for p in 0..3 {
                        for q in 0..3 {
                            for c_in in 0..ci {
                                acc += xv[((i + p) * w_ + j + q) * ci + c_in]
                                    * wv[((p * 3 + q) * ci + c_in) * co + c_out];
                            }
                        }
                    }
                    expected[(i * wo + j) * co + c_out] = acc;
                }
            }
        }

        let mut g = Graph::new();
        let x = g.constant(t(vec![1, h, w_, ci], xv));
        let w = g.param(t(vec![3, 3, ci, co], wv), "w");
        let b = g.param(t(vec![co], bv), "b");
        let y = g.conv2d(x, w, b).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_constant_input_and_remainder() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 7, 1], vec![2.0; 7]));
        let avg = g.avgpool1d(x).unwrap();
        let max = g.maxpool1d(x).unwrap();
        // Length 7 -> 3; last element dropped.
        assert_eq!(g.value(avg).shape(), &[1, 3, 1]);
        assert_eq!(g.value(avg).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.value(max).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn pool1d_matches_loop_oracle() {
        let xv = vec![3.0, -1.0, 4.0, 1.0, 5.0, 9.0, 2.0];
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 7, 1], xv.clone()));
        let max = g.maxpool1d(x).unwrap();
        let avg = g.avgpool1d(x).unwrap();
        let mut want_max = vec![];
        let mut want_avg = vec![];
        for i in 0..3 {
            want_max.push(xv[2 * i].max(xv[2 * i + 1]));
            want_avg.push(0.5 * (xv[2 * i] + xv[2 * i + 1]));
        }
        assert_eq!(g.value(max).data(), &want_max[..]);
        assert_eq!(g.value(avg).data(), &want_avg[..]);
    }

    #[test]
    fn dense_identity_and_oracle() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.param(t(vec![3, 3], eye), "w");
        let b = g.param(Tensor::zeros(vec![3]), "b");
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        // 3 -> 2 random case vs matrix product oracle.
        let wv = vec![0.5, -1.0, 0.25, 2.0, -0.5, 0.75];
        let bv = vec![0.1, -0.2];
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let w = g.param(t(vec![3, 2], wv.clone()), "w");
        let b = g.param(t(vec![2], bv.clone()), "b");
        let y = g.dense(x, w, b).unwrap();
        let want = [
            1.0 * wv[0] + 2.0 * wv[2] + 3.0 * wv[4] + bv[0],
            1.0 * wv[1] + 2.0 * wv[3] + 3.0 * wv[5] + bv[1],
        ];
        for (got, want) in g.value(y).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 3], vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(vec![1, 1], vec![0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn backward_through_dense_chain() {
        // y = w2 * relu(w1 * x); check gradient signs and chain rule by hand.
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 1], vec![2.0]));
        let w1 = g.param(t(vec![1, 1], vec![3.0]), "w1");
        let b1 = g.param(t(vec![1], vec![0.0]), "b1");
        let h = g.dense(x, w1, b1).unwrap();
        let r = g.relu(h).unwrap();
        let w2 = g.param(t(vec![1, 1], vec![-1.5]), "w2");
        let b2 = g.param(t(vec![1], vec![0.0]), "b2");
        let y = g.dense(r, w2, b2).unwrap();
        let loss = g.sse_loss(y, vec![0.0]).unwrap();
        // y = -1.5 * 6 = -9; loss = 0.5 * 81 = 40.5; dL/dy = y = -9.
        assert!((g.value(loss).item() - 40.5).abs() < 1e-12);
        g.backward(loss).unwrap();
        // dL/dw2 = dL/dy * r = -9 * 6 = -54
        assert!((g.grad(w2).unwrap().data()[0] + 54.0).abs() < 1e-12);
        // dL/dw1 = dL/dy * w2 * x = -9 * -1.5 * 2 = 27
        assert!((g.grad(w1).unwrap().data()[0] - 27.0).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(vec![1, 2], vec![1.0, 2.0]), "x");
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(NnError::Usage(_))));
    }

    #[test]
    fn replay_matches_full_forward() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2], vec![1.0, -1.0]));
        let w = g.param(t(vec![2, 2], vec![0.3, 0.5, -0.2, 0.8]), "w");
        let b = g.param(t(vec![2], vec![0.1, 0.2]), "b");
        let d = g.dense(x, w, b).unwrap();
        let r = g.relu(d).unwrap();
        let loss = g.sse_loss(r, vec![1.0, 1.0]).unwrap();

        // Perturb w[0] and compare replay with a freshly built graph.
        let mut wv = g.value(w).clone();
        wv.data_mut()[0] += 0.25;
        let affected = g.affected_from(w);
        let replayed = g.replay(&affected, &wv, loss).unwrap();

        let mut g2 = Graph::new();
        let x2 = g2.constant(t(vec![1, 2], vec![1.0, -1.0]));
        let w2 = g2.param(wv, "w");
        let b2 = g2.param(t(vec![2], vec![0.1, 0.2]), "b");
        let d2 = g2.dense(x2, w2, b2).unwrap();
        let r2 = g2.relu(d2).unwrap();
        let loss2 = g2.sse_loss(r2, vec![1.0, 1.0]).unwrap();
        assert!((replayed - g2.value(loss2).item()).abs() < 1e-15);
    }
}
