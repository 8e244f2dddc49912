// SPDX-License-Identifier: MIT OR Apache-2.0

//! Depth × token × component fields.
//!
//! Layer index 0 is the embedding output; layer `l >= 1` is the residual
//! stream after block `l`. Every field in this crate (residuals,
//! sensitivities, tangents, responses) shares this layout.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::numeric::norm;

/// A residual site: the stream after block `layer` at token position `token`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub token: usize,
}

impl Site {
    pub const fn new(layer: usize, token: usize) -> Self {
        Self { layer, token }
    }

    /// True when `self` lies in the forward causal cone of `source`.
    pub fn is_downstream_of(&self, source: Site) -> bool {
        self.layer >= source.layer && self.token >= source.token
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.layer, self.token)
    }
}

/// Dense `[layers][tokens][width]` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    layers: usize,
    tokens: usize,
    width: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(layers: usize, tokens: usize, width: usize) -> Self {
        Self {
            layers,
            tokens,
            width,
            data: vec![0.0; layers * tokens * width],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, layer: usize, token: usize) -> usize {
        assert!(
            layer < self.layers && token < self.tokens,
            "site ({layer}, {token}) outside field [{}][{}]",
            self.layers,
            self.tokens
        );
        (layer * self.tokens + token) * self.width
    }

    /// Vector at one site.
    pub fn at(&self, layer: usize, token: usize) -> &[f64] {
        let o = self.offset(layer, token);
        &self.data[o..o + self.width]
    }

    pub fn at_mut(&mut self, layer: usize, token: usize) -> &mut [f64] {
        let o = self.offset(layer, token);
        &mut self.data[o..o + self.width]
    }

    pub fn site(&self, site: Site) -> &[f64] {
        self.at(site.layer, site.token)
    }

    /// All tokens of one layer, `[tokens * width]`.
    pub fn layer(&self, layer: usize) -> &[f64] {
        let o = self.offset(layer, 0);
        &self.data[o..o + self.tokens * self.width]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [f64] {
        let o = self.offset(layer, 0);
        let len = self.tokens * self.width;
        &mut self.data[o..o + len]
    }

    /// Euclidean norm at every site, `[layers][tokens]` row-major.
    pub fn site_norms(&self) -> Vec<f64> {
        self.data.chunks(self.width).map(norm).collect()
    }

    /// Frobenius norm over the whole field.
    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First site holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<Site> {
        self.data.iter().position(|v| !v.is_finite()).map(|i| {
            let s = i / self.width;
            Site::new(s / self.tokens, s % self.tokens)
        })
    }

    /// `self - other`, elementwise.
    pub fn diff(&self, other: &Field) -> Field {
        assert_eq!(
            (self.layers, self.tokens, self.width),
            (other.layers, other.tokens, other.width),
            "field shape mismatch"
        );
        Field {
            layers: self.layers,
            tokens: self.tokens,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }
}

macro_rules! field_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(pub Field);

        impl Deref for $name {
            type Target = Field;
            fn deref(&self) -> &Field {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut Field {
                &mut self.0
            }
        }

        impl From<Field> for $name {
            fn from(f: Field) -> Self {
                Self(f)
            }
        }
    };
}

field_newtype!(
    /// Residual stream values `R_l(x)` over `[L+1][n][d]`.
    ResidualField
);
field_newtype!(
    /// `a(l, x) = dy / dR_l(x)`, the adjoint field of the scalar observable.
    SensitivityField
);
field_newtype!(
    /// First-order response of every residual slice to a seeded perturbation.
    TangentField
);
field_newtype!(
    /// Measured `R_patched - R_clean`.
    ResponseField
);
