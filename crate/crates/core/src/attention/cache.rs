use super::{AttentionError, HeadGeometry};
use crate::numerics::Scalar;

/// Rotated keys and raw values of one key/value head, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KvHead<T> {
    d_qk: usize,
    d_vo: usize,
    keys: Vec<T>,
    values: Vec<T>,
}

impl<T: Scalar> KvHead<T> {
    fn with_capacity(d_qk: usize, d_vo: usize, tokens: usize) -> Self {
        Self {
            d_qk,
            d_vo,
            keys: Vec::with_capacity(tokens * d_qk),
            values: Vec::with_capacity(tokens * d_vo),
        }
    }

    pub fn key(&self, pos: usize) -> &[T] {
        &self.keys[pos * self.d_qk..(pos + 1) * self.d_qk]
    }

    pub fn value(&self, pos: usize) -> &[T] {
        &self.values[pos * self.d_vo..(pos + 1) * self.d_vo]
    }

    pub fn keys(&self) -> &[T] {
        &self.keys
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Append-only cache for one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKvCache<T> {
    d_qk: usize,
    d_vo: usize,
    heads: Vec<KvHead<T>>,
    len: usize,
    capacity: usize,
}

impl<T: Scalar> LayerKvCache<T> {
    pub fn new(geom: &HeadGeometry) -> Self {
        Self::with_capacity(geom, 0)
    }

    pub fn with_capacity(geom: &HeadGeometry, tokens: usize) -> Self {
        Self {
            d_qk: geom.d_qk,
            d_vo: geom.d_vo,
            heads: (0..geom.n_kv_heads)
                .map(|_| KvHead::with_capacity(geom.d_qk, geom.d_vo, tokens))
                .collect(),
            len: 0,
            capacity: tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Tokens storable before the next reallocation.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn heads(&self) -> &[KvHead<T>] {
        &self.heads
    }

    pub(super) fn check_geometry(&self, geom: &HeadGeometry) -> Result<(), AttentionError> {
        if self.d_qk != geom.d_qk || self.d_vo != geom.d_vo || self.heads.len() != geom.n_kv_heads {
            return Err(AttentionError::Geometry(format!(
                "cache laid out for {} heads of ({}, {}), layer wants {} of ({}, {})",
                self.heads.len(),
                self.d_qk,
                self.d_vo,
                geom.n_kv_heads,
                geom.d_qk,
                geom.d_vo
            )));
        }
        Ok(())
    }

    /// Appends one token: `keys` is `[n_kv·d_qk]` (already rotated),
    /// `values` is `[n_kv·d_vo]`.
    pub fn append(&mut self, keys: &[T], values: &[T]) -> Result<(), AttentionError> {
        let n = self.heads.len();
        if keys.len() != n * self.d_qk || values.len() != n * self.d_vo {
            return Err(AttentionError::WeightShape {
                name: "kv row",
                got: vec![keys.len(), values.len()],
                want: vec![n * self.d_qk, n * self.d_vo],
            });
        }
        if self.len == self.capacity {
            self.capacity = (self.capacity * 2).max(16);
            let extra = self.capacity - self.len;
            for head in &mut self.heads {
                head.keys.reserve_exact(extra * self.d_qk);
                head.values.reserve_exact(extra * self.d_vo);
            }
        }
        for (g, head) in self.heads.iter_mut().enumerate() {
            head.keys.extend_from_slice(&keys[g * self.d_qk..(g + 1) * self.d_qk]);
            head.values
                .extend_from_slice(&values[g * self.d_vo..(g + 1) * self.d_vo]);
        }
        self.len += 1;
        Ok(())
    }

    /// Elements held (keys plus values) across heads.
    pub fn elements(&self) -> usize {
        self.len * self.heads.len() * (self.d_qk + self.d_vo)
    }
}

/// One [`LayerKvCache`] per decoder layer; all layers advance together.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    layers: Vec<LayerKvCache<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(geom: &HeadGeometry, n_layers: usize, capacity: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|_| LayerKvCache::with_capacity(geom, capacity))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKvCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, l: usize) -> &LayerKvCache<T> {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerKvCache<T> {
        &mut self.layers[l]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn elements(&self) -> usize {
        self.layers.iter().map(LayerKvCache::elements).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn growth_is_geometric() {
        let g = HeadGeometry {
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 2,
            d_qk: 2,
            d_vo: 3,
        };
        let mut c = LayerKvCache::<f32>::new(&g);
        let mut reallocations = 0;
        let mut cap = c.capacity();
        for _ in 0..1000 {
            c.append(&[1.0; 4], &[2.0; 6]).unwrap();
            if c.capacity() != cap {
                reallocations += 1;
                cap = c.capacity();
            }
        }
        assert_eq!(c.len(), 1000);
        assert!(reallocations <= 7, "{reallocations}");
        assert_eq!(c.elements(), 1000 * 2 * 5);
        assert!(c.append(&[1.0; 3], &[2.0; 6]).is_err());
    }
}
