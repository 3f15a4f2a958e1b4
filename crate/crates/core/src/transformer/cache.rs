/// Keys and values of one layer, each `[len × d_model]` row-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerKv {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

/// Append-only per-layer key/value history for one causal session.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub(crate) layers: Vec<LayerKv>,
    pub(crate) d_model: usize,
    pub(crate) max_len: usize,
    pub(crate) len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, d_model: usize, max_len: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|_| LayerKv {
                    keys: Vec::with_capacity(max_len * d_model),
                    values: Vec::with_capacity(max_len * d_model),
                })
                .collect(),
            d_model,
            max_len,
            len: 0,
        }
    }

    /// Token positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.max_len
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }
}
