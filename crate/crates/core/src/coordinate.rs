//! The reader-visible coordinate: packaging of fitted weights and their
//! arrangement into per-neuron tokens `[incoming W row, bias]`.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tensor, Var, PAD};
use crate::siren::SirenConfig;

/// Which quantity the reader sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackagingMode {
    /// `φ`
    RawFull,
    /// `λ(φ + β)`
    FullShift,
    /// `λ(φ − θ)`
    ResidualOnly,
    /// `λ((φ − θ) + β)`
    #[default]
    ResidualShift,
}

impl PackagingMode {
    pub const ALL: [PackagingMode; 4] = [
        PackagingMode::RawFull,
        PackagingMode::FullShift,
        PackagingMode::ResidualOnly,
        PackagingMode::ResidualShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PackagingMode::RawFull => "raw_full",
            PackagingMode::FullShift => "full_shift",
            PackagingMode::ResidualOnly => "residual_only",
            PackagingMode::ResidualShift => "residual_shift",
        }
    }
}

impl FromStr for PackagingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PackagingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Mode(format!("unknown packaging mode {s:?}")))
    }
}

/// Reader-side shift `β` and input scale `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderCoordinateParams {
    /// `1 × P`
    pub beta: Tensor,
    pub lambda: f64,
}

impl ReaderCoordinateParams {
    pub const DEFAULT_LAMBDA: f64 = 100.0;

    pub fn new(param_count: usize) -> Self {
        Self { beta: Tensor::zeros(1, param_count), lambda: Self::DEFAULT_LAMBDA }
    }
}

/// Packages flat fitted weights `φ` against the anchor `θ`.
pub fn package(
    fitted: &[f64],
    anchor: &[f64],
    params: &ReaderCoordinateParams,
    mode: PackagingMode,
) -> Result<Vec<f64>> {
    let p = fitted.len();
    if anchor.len() != p || params.beta.len() != p {
        return Err(Error::shape("fitted, anchor and shift must share the flat layout"));
    }
    let lam = params.lambda;
    let beta = params.beta.data();
    Ok(match mode {
        PackagingMode::RawFull => fitted.to_vec(),
        PackagingMode::FullShift => (0..p).map(|i| (fitted[i] + beta[i]) * lam).collect(),
        PackagingMode::ResidualOnly => (0..p).map(|i| (fitted[i] - anchor[i]) * lam).collect(),
        PackagingMode::ResidualShift => {
            (0..p).map(|i| ((fitted[i] - anchor[i]) + beta[i]) * lam).collect()
        }
    })
}

/// Tape version of [`package`]; `lambda` is `1 × 1`. Produces the same bits.
pub fn package_var<'t>(
    fitted: Var<'t>,
    anchor: Var<'t>,
    beta: Var<'t>,
    lambda: Var<'t>,
    mode: PackagingMode,
) -> Var<'t> {
    match mode {
        PackagingMode::RawFull => fitted,
        PackagingMode::FullShift => (fitted + beta).mul_scalar_var(lambda),
        PackagingMode::ResidualOnly => (fitted - anchor).mul_scalar_var(lambda),
        PackagingMode::ResidualShift => ((fitted - anchor) + beta).mul_scalar_var(lambda),
    }
}

/// Which SIREN layers contribute tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScope {
    /// One token per output neuron of every sine layer.
    #[default]
    HiddenOnly,
    /// Also one token per output unit of the final linear layer.
    AllLayers,
}

/// Index bookkeeping that maps flat coordinates to token cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub num_tokens: usize,
    pub token_dim: usize,
    pub layer_of_token: Vec<usize>,
    pub neuron_of_token: Vec<usize>,
    /// `num_tokens · token_dim` flat indices, [`PAD`] for zero padding.
    pub source: Vec<usize>,
    pub param_count: usize,
}

impl TokenLayout {
    pub fn new(config: &SirenConfig, scope: TokenScope) -> Self {
        let layers = config.layers();
        let used = match scope {
            TokenScope::HiddenOnly => &layers[..config.num_hidden_layers],
            TokenScope::AllLayers => &layers[..],
        };
        let max_fan_in = used.iter().map(|l| l.fan_in).max().unwrap_or(0);
        let token_dim = max_fan_in + 1;
        let mut layer_of_token = Vec::new();
        let mut neuron_of_token = Vec::new();
        let mut source = Vec::new();
        for (l, layer) in used.iter().enumerate() {
            for j in 0..layer.fan_out {
                layer_of_token.push(l);
                neuron_of_token.push(j);
                for c in 0..max_fan_in {
                    source.push(if c < layer.fan_in { layer.weight_index(j, c) } else { PAD });
                }
                source.push(layer.bias_index(j));
            }
        }
        Self {
            num_tokens: layer_of_token.len(),
            token_dim,
            layer_of_token,
            neuron_of_token,
            source,
            param_count: config.param_count(),
        }
    }

    pub fn bias_column(&self) -> usize {
        self.token_dim - 1
    }

    /// Flat index of each token's bias entry.
    pub fn bias_sources(&self) -> Vec<usize> {
        (0..self.num_tokens).map(|t| self.source[t * self.token_dim + self.bias_column()]).collect()
    }

    /// Columns of token `t` that hold a real weight (not padding).
    pub fn weight_width(&self, token: usize) -> usize {
        let row = &self.source[token * self.token_dim..(token + 1) * self.token_dim - 1];
        row.iter().take_while(|&&s| s != PAD).count()
    }

    pub fn tokenize(&self, z: &[f64]) -> Result<AugmentedTokenSet> {
        if z.len() != self.param_count {
            return Err(Error::shape(format!(
                "coordinate has {} entries, layout expects {}",
                z.len(),
                self.param_count
            )));
        }
        let data = self.source.iter().map(|&s| if s == PAD { 0.0 } else { z[s] }).collect();
        Ok(AugmentedTokenSet {
            tokens: Tensor::new(self.num_tokens, self.token_dim, data),
            layer_of_token: self.layer_of_token.clone(),
            neuron_of_token: self.neuron_of_token.clone(),
            bias_column: self.bias_column(),
        })
    }

    pub fn tokenize_var<'t>(&self, z: Var<'t>) -> Var<'t> {
        z.gather(&self.source, self.num_tokens, self.token_dim)
    }

    /// Writes token cells back to a flat vector; coordinates outside the
    /// tokenized layers stay zero.
    pub fn untokenize(&self, tokens: &Tensor) -> Vec<f64> {
        let mut z = vec![0.0; self.param_count];
        for (&s, &v) in self.source.iter().zip(tokens.data()) {
            if s != PAD {
                z[s] = v;
            }
        }
        z
    }
}

/// One image's reader-visible tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedTokenSet {
    /// `num_tokens × token_dim`; the last column is the bias coordinate.
    pub tokens: Tensor,
    pub layer_of_token: Vec<usize>,
    pub neuron_of_token: Vec<usize>,
    pub bias_column: usize,
}

impl AugmentedTokenSet {
    pub fn bias_values(&self) -> Vec<f64> {
        (0..self.tokens.rows()).map(|t| self.tokens.get(t, self.bias_column)).collect()
    }
}

/// Tokenizes a packaged coordinate with the hidden-only layout.
pub fn tokenize(z: &[f64], arch: &SirenConfig) -> Result<AugmentedTokenSet> {
    TokenLayout::new(arch, TokenScope::HiddenOnly).tokenize(z)
}

/// The packaged bias column split into its sample part and shift part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSplit {
    /// Residual `Δ` at each token's bias coordinate.
    pub delta_b: Vec<f64>,
    /// Shift `β` at each token's bias coordinate.
    pub beta_b: Vec<f64>,
    pub lambda: f64,
}

impl BiasSplit {
    /// `λ(δ_b + β_b)`, evaluated in the same order as packaging.
    pub fn recombine(&self) -> Vec<f64> {
        self.delta_b.iter().zip(&self.beta_b).map(|(d, b)| (d + b) * self.lambda).collect()
    }
}

/// Recovers `δ_b` and `β_b` for a residual-shift packaged image.
pub fn split_bias(
    layout: &TokenLayout,
    fitted: &[f64],
    anchor: &[f64],
    params: &ReaderCoordinateParams,
    mode: PackagingMode,
) -> Result<BiasSplit> {
    if mode != PackagingMode::ResidualShift {
        return Err(Error::Mode(format!(
            "bias split needs residual_shift packaging, got {}",
            mode.name()
        )));
    }
    if fitted.len() != layout.param_count || anchor.len() != layout.param_count {
        return Err(Error::shape("bias split inputs must match the flat layout"));
    }
    let sources = layout.bias_sources();
    Ok(BiasSplit {
        delta_b: sources.iter().map(|&s| fitted[s] - anchor[s]).collect(),
        beta_b: sources.iter().map(|&s| params.beta.data()[s]).collect(),
        lambda: params.lambda,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpSidecar {
    shape: [usize; 3],
    dtype: String,
    byte_order: String,
    layer_of_token: Vec<usize>,
    neuron_of_token: Vec<usize>,
    bias_column: usize,
    labels: Vec<usize>,
}

/// Writes `path.bin` (little-endian f64, image-major) and `path.json`.
pub fn write_token_dump(path: &Path, sets: &[AugmentedTokenSet], labels: &[usize]) -> Result<()> {
    let first = sets.first().ok_or_else(|| Error::arg("token dump needs at least one image"))?;
    let [rows, cols] = first.tokens.shape();
    let mut bytes = Vec::with_capacity(sets.len() * rows * cols * 8);
    for s in sets {
        if s.tokens.shape() != [rows, cols] {
            return Err(Error::shape("token sets in one dump must share a shape"));
        }
        for v in s.tokens.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sidecar = DumpSidecar {
        shape: [sets.len(), rows, cols],
        dtype: "float64".into(),
        byte_order: "little".into(),
        layer_of_token: first.layer_of_token.clone(),
        neuron_of_token: first.neuron_of_token.clone(),
        bias_column: first.bias_column,
        labels: labels.to_vec(),
    };
    fs::write(path.with_extension("bin"), bytes)?;
    fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads a dump written by [`write_token_dump`]; returns tokens and labels.
pub fn read_token_dump(path: &Path) -> Result<(Vec<AugmentedTokenSet>, Vec<usize>)> {
    let sidecar: DumpSidecar = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
    let bytes = fs::read(path.with_extension("bin"))?;
    let [n, rows, cols] = sidecar.shape;
    if bytes.len() != n * rows * cols * 8 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "token dump size disagrees with its sidecar".into(),
        });
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let sets = values
        .chunks_exact(rows * cols)
        .map(|chunk| AugmentedTokenSet {
            tokens: Tensor::new(rows, cols, chunk.to_vec()),
            layer_of_token: sidecar.layer_of_token.clone(),
            neuron_of_token: sidecar.neuron_of_token.clone(),
            bias_column: sidecar.bias_column,
        })
        .collect();
    Ok((sets, sidecar.labels))
}
