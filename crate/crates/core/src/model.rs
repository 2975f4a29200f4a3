//! The three learnable functions plus normalization, bundled.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Normalizer, PredictionHead};
use crate::env::FamilyKind;
use crate::nn::{Matrix, Tensor};
use crate::relation::RelationalHead;
use crate::segment::{ContextEncoder, TransitionSegment, DEFAULT_SEGMENT_LEN};
use crate::{Error, Result, SimRng, CONTEXT_DIM};

/// Layer widths of the three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub relation_hidden: usize,
    /// Transition segment length `k`.
    pub segment_len: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![128; 3],
            head_hidden: vec![200; 4],
            relation_hidden: CONTEXT_DIM,
            segment_len: DEFAULT_SEGMENT_LEN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    pub kind: FamilyKind,
    pub encoder: ContextEncoder,
    pub head: PredictionHead,
    pub relation: RelationalHead,
    pub norm: Normalizer,
    /// When false the context is pinned to zero and the encoder is unused.
    pub use_context: bool,
}

impl WorldModel {
    pub fn new(kind: FamilyKind, net: &NetworkConfig, use_context: bool, rng: &mut SimRng) -> Result<Self> {
        let (sd, ad) = (kind.state_dim(), kind.action_dim());
        let encoder = ContextEncoder::new(net.segment_len, sd, ad, &net.encoder_hidden, rng)?;
        let head = PredictionHead::new(sd, ad, CONTEXT_DIM, &net.head_hidden, rng)?;
        let relation = RelationalHead::new(CONTEXT_DIM, net.relation_hidden, rng)?;
        Ok(Self {
            kind,
            encoder,
            head,
            relation,
            norm: Normalizer::identity(sd, ad),
            use_context,
        })
    }

    pub fn segment_len(&self) -> usize {
        self.encoder.segment_len()
    }

    /// Context for one segment (zero vector when contexts are disabled).
    pub fn context(&self, seg: &TransitionSegment) -> Result<Vec<f64>> {
        if self.use_context {
            Ok(self.encoder.encode(&self.norm, seg)?.0)
        } else {
            Ok(vec![0.0; CONTEXT_DIM])
        }
    }

    pub fn contexts(&self, segs: &[&TransitionSegment]) -> Result<Matrix> {
        if self.use_context {
            self.encoder.encode_batch(&self.norm, segs)
        } else {
            Ok(Matrix::zeros(segs.len(), CONTEXT_DIM))
        }
    }

    /// Parameter blocks of encoder, head and relational head, in that order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.net.param_slices_mut();
        out.extend(self.head.net.param_slices_mut());
        out.extend(self.relation.net.param_slices_mut());
        out
    }

    pub fn param_block_lens(&self) -> Vec<usize> {
        self.encoder
            .net
            .param_slices()
            .iter()
            .chain(self.head.net.param_slices().iter())
            .chain(self.relation.net.param_slices().iter())
            .map(|s| s.len())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.encoder.net.num_params() + self.head.net.num_params() + self.relation.net.num_params()
    }

    pub fn flat_param(&self, idx: usize) -> f64 {
        let (e, h) = (self.encoder.net.num_params(), self.head.net.num_params());
        if idx < e {
            self.encoder.net.flat_param(idx)
        } else if idx < e + h {
            self.head.net.flat_param(idx - e)
        } else {
            self.relation.net.flat_param(idx - e - h)
        }
    }

    pub fn set_flat_param(&mut self, idx: usize, v: f64) {
        let (e, h) = (self.encoder.net.num_params(), self.head.net.num_params());
        if idx < e {
            self.encoder.net.set_flat_param(idx, v)
        } else if idx < e + h {
            self.head.net.set_flat_param(idx - e, v)
        } else {
            self.relation.net.set_flat_param(idx - e - h, v)
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.head.tensors());
        t.extend(self.relation.tensors());
        t.extend(self.norm.tensors());
        t
    }

    pub fn load_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        self.encoder.net.load_tensors("encoder", tensors)?;
        self.head.net.load_tensors("head", tensors)?;
        self.relation.net.load_tensors("relation", tensors)?;
        self.norm.load_tensors(tensors)?;
        let known = self.tensors();
        if let Some(extra) = tensors.iter().find(|t| !known.iter().any(|k| k.name == t.name)) {
            return Err(Error::Load(format!("unexpected tensor {}", extra.name)));
        }
        Ok(())
    }
}
