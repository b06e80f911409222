//! Architecture description language.
//!
//! An architecture is an ordered list of kernel-space layers applied after the
//! (implicit) input kernel. The text form is one layer per line:
//!
//! ```text
//! # Myrtle-style block
//! conv 3
//! relu
//! pool 2
//! gpool
//! ```
//!
//! `conv N` takes the odd side length of the filter (`conv 3` has half-width 1),
//! `pool N` averages non-overlapping `N x N` windows, `relu` and `gauss` are the
//! two embedding layers and `gpool` pools whatever spatial extent remains.

use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArchError {
    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown token `{token}`")]
    UnknownToken { line: usize, token: String },
    #[error("line {line}: convolution size {size} is even (must be odd)")]
    EvenConvSize { line: usize, size: usize },
    #[error("line {line}: convolution size {size} is below 3")]
    ConvTooSmall { line: usize, size: usize },
    #[error("line {line}: pool size {size} is below 2")]
    PoolTooSmall { line: usize, size: usize },
    #[error("layer {layer} (pool {width}): spatial dims {d1}x{d2} are not divisible by {width}")]
    PoolIndivisible {
        layer: usize,
        width: usize,
        d1: usize,
        d2: usize,
    },
    #[error("spatial dims must be at least 1x1, got {0}x{1}")]
    EmptySpatial(usize, usize),
    #[error("architecture leaves spatial dims {d1}x{d2}; the kernel does not reduce to one value per image pair")]
    NotScalar { d1: usize, d2: usize },
    #[error("cannot read architecture file {path}: {message}")]
    Io { path: String, message: String },
}

/// One kernel-space layer. The input kernel is implicit and never listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    /// Zero-padded convolution over a `(2w+1) x (2w+1)` window.
    Conv {
        half_width: usize,
    },
    /// Average pooling over non-overlapping `w x w` windows.
    Pool {
        width: usize,
    },
    ReluEmbed,
    GaussEmbed,
    /// Average over the whole remaining spatial extent.
    GlobalPool,
}

impl Layer {
    /// Convolution from its odd side length (`3` gives half-width 1).
    pub fn conv(side: usize) -> Self {
        debug_assert!(side % 2 == 1 && side >= 3);
        Layer::Conv {
            half_width: side / 2,
        }
    }

    pub fn pool(width: usize) -> Self {
        debug_assert!(width >= 2);
        Layer::Pool { width }
    }

    pub fn is_embedding(&self) -> bool {
        matches!(self, Layer::ReluEmbed | Layer::GaussEmbed)
    }

    /// Spatial dims after this layer, or the pool width that fails to divide.
    pub fn output_dims(&self, dims: (usize, usize)) -> Result<(usize, usize), usize> {
        match *self {
            Layer::Pool { width } => {
                if !dims.0.is_multiple_of(width) || !dims.1.is_multiple_of(width) {
                    Err(width)
                } else {
                    Ok((dims.0 / width, dims.1 / width))
                }
            }
            Layer::GlobalPool => Ok((1, 1)),
            _ => Ok(dims),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv { half_width } => write!(f, "conv {}", 2 * half_width + 1),
            Layer::Pool { width } => write!(f, "pool {width}"),
            Layer::ReluEmbed => f.write_str("relu"),
            Layer::GaussEmbed => f.write_str("gauss"),
            Layer::GlobalPool => f.write_str("gpool"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ArchSpec {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl ArchSpec {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Self {
        Self {
            name: name.into(),
            layers,
        }
    }

    /// Reads an architecture file, naming it after the file stem.
    pub fn load(path: &Path) -> Result<Self, ArchError> {
        let text = std::fs::read_to_string(path).map_err(|e| ArchError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut spec = parse_arch(&text)?;
        spec.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(spec)
    }

    /// Canonical text, see [`render_arch`].
    pub fn render(&self) -> String {
        render_arch(self)
    }

    /// Myrtle family of depth 5, 7 or 10: a stem conv, three conv stages
    /// separated by 2x2 pools, then three more 2x2 pools (32 -> 1).
    pub fn myrtle(depth: usize, embed: Layer) -> Option<Self> {
        let stages: [usize; 3] = match depth {
            5 => [2, 1, 1],
            7 => [2, 2, 2],
            10 => [3, 3, 3],
            _ => return None,
        };
        let mut layers = vec![Layer::conv(3), embed];
        for (i, &count) in stages.iter().enumerate() {
            for _ in 0..count {
                layers.push(Layer::conv(3));
                layers.push(embed);
            }
            layers.push(Layer::pool(2));
            if i == 2 {
                layers.push(Layer::pool(2));
                layers.push(Layer::pool(2));
            }
        }
        let suffix = if embed == Layer::GaussEmbed {
            "-gauss"
        } else {
            ""
        };
        Some(Self::new(format!("myrtle{depth}{suffix}"), layers))
    }
}

/// Parses the line-oriented DSL. Blank lines and `#` comments are skipped;
/// tokens are separated by arbitrary whitespace.
pub fn parse_arch(text: &str) -> Result<ArchSpec, ArchError> {
    let mut layers = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let mut tokens = content.split_whitespace();
        let Some(head) = tokens.next() else { continue };
        let arg = tokens.next();
        if let Some(extra) = tokens.next() {
            return Err(ArchError::Syntax {
                line,
                message: format!("unexpected trailing token `{extra}`"),
            });
        }
        let layer = match head {
            "conv" | "pool" => {
                let arg = arg.ok_or_else(|| ArchError::Syntax {
                    line,
                    message: format!("`{head}` needs a size"),
                })?;
                let size = parse_size(arg, line)?;
                if head == "conv" {
                    if size % 2 == 0 {
                        return Err(ArchError::EvenConvSize { line, size });
                    }
                    if size < 3 {
                        return Err(ArchError::ConvTooSmall { line, size });
                    }
                    Layer::conv(size)
                } else {
                    if size < 2 {
                        return Err(ArchError::PoolTooSmall { line, size });
                    }
                    Layer::pool(size)
                }
            }
            "relu" | "gauss" | "gpool" => {
                if let Some(arg) = arg {
                    return Err(ArchError::Syntax {
                        line,
                        message: format!("`{head}` takes no argument, got `{arg}`"),
                    });
                }
                match head {
                    "relu" => Layer::ReluEmbed,
                    "gauss" => Layer::GaussEmbed,
                    _ => Layer::GlobalPool,
                }
            }
            other => {
                return Err(ArchError::UnknownToken {
                    line,
                    token: other.to_string(),
                })
            }
        };
        layers.push(layer);
    }
    Ok(ArchSpec {
        name: String::new(),
        layers,
    })
}

fn parse_size(arg: &str, line: usize) -> Result<usize, ArchError> {
    if !arg.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ArchError::Syntax {
            line,
            message: format!("expected a positive integer, got `{arg}`"),
        });
    }
    match arg.parse::<usize>() {
        Ok(0) | Err(_) => Err(ArchError::Syntax {
            line,
            message: format!("expected a positive integer, got `{arg}`"),
        }),
        Ok(v) => Ok(v),
    }
}

/// One layer per line, single space, trailing newline after every layer.
pub fn render_arch(spec: &ArchSpec) -> String {
    let mut out = String::new();
    for layer in &spec.layers {
        out.push_str(&layer.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    /// Spatial dims before the first layer and after each layer.
    pub stage_dims: Vec<(usize, usize)>,
    pub final_dims: (usize, usize),
    pub flattens_to_scalar: bool,
}

/// Simulates spatial dims through the layer list.
pub fn validate_arch(
    spec: &ArchSpec,
    spatial: (usize, usize),
) -> Result<ValidationReport, ArchError> {
    if spatial.0 == 0 || spatial.1 == 0 {
        return Err(ArchError::EmptySpatial(spatial.0, spatial.1));
    }
    let mut dims = spatial;
    let mut stage_dims = Vec::with_capacity(spec.layers.len() + 1);
    stage_dims.push(dims);
    for (layer_idx, layer) in spec.layers.iter().enumerate() {
        dims = layer
            .output_dims(dims)
            .map_err(|width| ArchError::PoolIndivisible {
                layer: layer_idx,
                width,
                d1: dims.0,
                d2: dims.1,
            })?;
        stage_dims.push(dims);
    }
    Ok(ValidationReport {
        stage_dims,
        final_dims: dims,
        flattens_to_scalar: dims == (1, 1),
    })
}
