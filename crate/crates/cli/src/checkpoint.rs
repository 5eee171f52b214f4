//! `DFC1` checkpoints: the magic bytes, a `key = value` text header ending
//! in a blank line, then every parameter as a little-endian `f64` in the
//! order of [`LayerStack::params`].
//!
//! ```text
//! DFC1
//! version = 1
//! in_dim = 2
//! radius = 0.6928203230275509
//! cap = 16
//! layers = 2
//! layer.0 = deform in=2 out=8 k=3 a=0.2,0.2,0.2 bias=1
//! layer.1 = relu
//! params = 432,8
//! total = 440
//!
//! <440 * 8 bytes>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use deformconv_core::baselines::{Dense, MlpFilter, PccLayer};
use deformconv_core::deform::{AnchorGrid, DeformableFilter, SeparableFilter};
use deformconv_core::matrix::Matrix;
use deformconv_core::nn::{Layer, LayerStack, Neighborhood};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"DFC1";
pub const VERSION: u32 = 1;

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn describe(layer: &Layer<f64>) -> String {
    let grid = |g: &AnchorGrid<f64>| format!("k={} a={}", g.k(), join(&g.unit()));
    match layer {
        Layer::Deform(f) => format!(
            "deform in={} out={} {} bias={}",
            f.in_dim(),
            f.out_dim(),
            grid(f.grid()),
            u8::from(f.bias().is_some())
        ),
        Layer::Separable(f) => format!(
            "separable in={} out={} {} bias={}",
            f.in_dim(),
            f.out_dim(),
            grid(f.grid()),
            u8::from(f.bias().is_some())
        ),
        Layer::Pcc(p) => {
            let layers = p.mlp.layers();
            let hidden: Vec<usize> = layers[..layers.len() - 1].iter().map(Dense::out_dim).collect();
            format!(
                "pcc in={} out={} hidden={} bias={}",
                p.in_dim(),
                p.out_dim(),
                join(&hidden),
                u8::from(p.bias.is_some())
            )
        }
        Layer::Linear(l) => format!("linear in={} out={}", l.in_dim(), l.out_dim()),
        Layer::Relu => "relu".into(),
        Layer::Concat { from } => format!("concat from={from}"),
        Layer::GlobalMaxPool => "maxpool".into(),
    }
}

pub fn to_bytes(stack: &LayerStack<f64>) -> Vec<u8> {
    let hood = stack.neighborhood();
    let mut header = format!(
        "version = {VERSION}\nin_dim = {}\nradius = {}\ncap = {}\nlayers = {}\n",
        stack.in_dim(),
        hood.radius,
        hood.cap,
        stack.layers().len()
    );
    for (i, l) in stack.layers().iter().enumerate() {
        header.push_str(&format!("layer.{i} = {}\n", describe(l)));
    }
    let shapes = stack.param_shapes();
    header.push_str(&format!("params = {}\ntotal = {}\n\n", join(&shapes), shapes.iter().sum::<usize>()));

    let mut out = Vec::with_capacity(5 + header.len() + 8 * stack.num_params());
    out.extend_from_slice(MAGIC);
    out.push(b'\n');
    out.extend_from_slice(header.as_bytes());
    for block in stack.params() {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(stack: &LayerStack<f64>, path: &Path) -> CliResult<()> {
    std::fs::write(path, to_bytes(stack)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<LayerStack<f64>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::data(format!("checkpoint field `{field}`: {msg}"))
}

/// Parses `name k=v k=v ...` layer descriptors.
struct Descriptor<'a> {
    field: String,
    kind: &'a str,
    attrs: BTreeMap<&'a str, &'a str>,
}

impl<'a> Descriptor<'a> {
    fn parse(field: String, text: &'a str) -> CliResult<Self> {
        let mut parts = text.split_whitespace();
        let kind = parts.next().ok_or_else(|| field_err(&field, "empty layer descriptor"))?;
        let mut attrs = BTreeMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| field_err(&field, format!("malformed attribute `{p}`")))?;
            attrs.insert(k, v);
        }
        Ok(Self { field, kind, attrs })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> CliResult<T> {
        let v = self
            .attrs
            .get(key)
            .ok_or_else(|| field_err(&self.field, format!("missing `{key}`")))?;
        v.parse()
            .map_err(|_| field_err(&format!("{}.{key}", self.field), format!("cannot parse `{v}`")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> CliResult<Vec<T>> {
        let v = self
            .attrs
            .get(key)
            .ok_or_else(|| field_err(&self.field, format!("missing `{key}`")))?;
        v.split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| field_err(&format!("{}.{key}", self.field), format!("cannot parse `{s}`")))
            })
            .collect()
    }

    fn bias(&self) -> CliResult<bool> {
        match self.get::<u8>("bias")? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(field_err(&format!("{}.bias", self.field), format!("expected 0 or 1, got {b}"))),
        }
    }

    fn grid(&self) -> CliResult<AnchorGrid<f64>> {
        let a = self.list::<f64>("a")?;
        let a: [f64; 3] = a
            .try_into()
            .map_err(|_| field_err(&format!("{}.a", self.field), "expected three unit lengths"))?;
        AnchorGrid::new(self.get("k")?, a).map_err(|e| field_err(&self.field, e))
    }
}

/// Hands out consecutive parameter blocks from the payload.
struct Payload<'a> {
    values: &'a [f64],
    shapes: &'a [usize],
    block: usize,
    offset: usize,
}

impl Payload<'_> {
    fn take(&mut self, field: &str, want: usize) -> CliResult<Vec<f64>> {
        let declared = *self
            .shapes
            .get(self.block)
            .ok_or_else(|| field_err("params", format!("too few blocks for {field}")))?;
        if declared != want {
            return Err(field_err(
                "params",
                format!("block {} declares {declared} values, {field} needs {want}", self.block),
            ));
        }
        let out = self.values[self.offset..self.offset + want].to_vec();
        self.block += 1;
        self.offset += want;
        Ok(out)
    }

    fn matrix(&mut self, field: &str, rows: usize, cols: usize) -> CliResult<Matrix<f64>> {
        let v = self.take(field, rows * cols)?;
        Matrix::from_vec(rows, cols, v).map_err(|e| field_err(field, e))
    }
}

pub fn from_bytes(bytes: &[u8]) -> CliResult<LayerStack<f64>> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .and_then(|r| r.strip_prefix(b"\n"))
        .ok_or_else(|| field_err("magic", "not a DFC1 checkpoint"))?;
    let end = rest
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| field_err("header", "no blank line terminating the header"))?;
    let header = std::str::from_utf8(&rest[..end + 1]).map_err(|_| field_err("header", "not UTF-8"))?;
    let payload = &rest[end + 2..];

    let mut fields = BTreeMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| field_err("header", format!("malformed line `{line}`")))?;
        fields.insert(k, v);
    }
    let get = |key: &str| fields.get(key).copied().ok_or_else(|| field_err(key, "missing"));
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
        v.parse().map_err(|_| field_err(key, format!("cannot parse `{v}`")))
    }

    let version: u32 = num("version", get("version")?)?;
    if version != VERSION {
        return Err(field_err("version", format!("unsupported version {version}, expected {VERSION}")));
    }
    let in_dim: usize = num("in_dim", get("in_dim")?)?;
    let hood = Neighborhood {
        radius: num("radius", get("radius")?)?,
        cap: num("cap", get("cap")?)?,
    };
    let n_layers: usize = num("layers", get("layers")?)?;
    let shapes: Vec<usize> = get("params")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| num("params", s))
        .collect::<CliResult<_>>()?;
    let total: usize = num("total", get("total")?)?;
    if shapes.iter().sum::<usize>() != total {
        return Err(field_err("total", format!("{total} does not equal the sum of `params`")));
    }
    if payload.len() != 8 * total {
        return Err(field_err(
            "total",
            format!("payload has {} bytes, header declares {total} values ({} bytes)", payload.len(), 8 * total),
        ));
    }
    let expected_fields = 7 + n_layers;
    if fields.len() != expected_fields {
        return Err(field_err("layers", format!("header has {} fields, expected {expected_fields}", fields.len())));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut p = Payload {
        values: &values,
        shapes: &shapes,
        block: 0,
        offset: 0,
    };

    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let field = format!("layer.{i}");
        let d = Descriptor::parse(field.clone(), get(&field)?)?;
        let wrap = |e: deformconv_core::Error| field_err(&field, e);
        let layer = match d.kind {
            "deform" => {
                let (din, dout, grid) = (d.get("in")?, d.get("out")?, d.grid()?);
                let w = p.take(&field, grid.len() * din * dout)?;
                let b = if d.bias()? { Some(p.take(&field, dout)?) } else { None };
                Layer::Deform(DeformableFilter::new(grid, din, dout, w, b).map_err(wrap)?)
            }
            "separable" => {
                let (din, dout, grid): (usize, usize, _) = (d.get("in")?, d.get("out")?, d.grid()?);
                let s = p.take(&field, grid.len() * din)?;
                let pw = p.matrix(&field, din, dout)?;
                let b = if d.bias()? { Some(p.take(&field, dout)?) } else { None };
                Layer::Separable(SeparableFilter::new(grid, s, pw, b).map_err(wrap)?)
            }
            "pcc" => {
                let (din, dout): (usize, usize) = (d.get("in")?, d.get("out")?);
                let mut widths = vec![3];
                widths.extend(d.list::<usize>("hidden")?);
                widths.push(din);
                let mut dense = Vec::new();
                for w in widths.windows(2) {
                    let weight = p.matrix(&field, w[0], w[1])?;
                    let bias = p.take(&field, w[1])?;
                    dense.push(Dense::new(weight, bias).map_err(wrap)?);
                }
                let mlp = MlpFilter::new(dense).map_err(wrap)?;
                let pw = p.matrix(&field, din, dout)?;
                let b = if d.bias()? { Some(p.take(&field, dout)?) } else { None };
                Layer::Pcc(PccLayer::new(mlp, pw, b).map_err(wrap)?)
            }
            "linear" => {
                let (din, dout) = (d.get("in")?, d.get("out")?);
                let w = p.matrix(&field, din, dout)?;
                let b = p.take(&field, dout)?;
                Layer::Linear(Dense::new(w, b).map_err(wrap)?)
            }
            "relu" => Layer::Relu,
            "concat" => Layer::Concat { from: d.get("from")? },
            "maxpool" => Layer::GlobalMaxPool,
            other => return Err(field_err(&field, format!("unknown layer type `{other}`"))),
        };
        layers.push(layer);
    }
    if p.block != shapes.len() {
        return Err(field_err("params", format!("{} blocks declared, layers use {}", shapes.len(), p.block)));
    }
    LayerStack::new(in_dim, layers, hood).map_err(|e| field_err("layers", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use deformconv_core::nn::StackBuilder;
    use deformconv_core::rng::seeded;

    fn sample() -> LayerStack<f64> {
        let g = AnchorGrid::new(3, [0.2, 0.25, 0.3]).unwrap();
        let hood = Neighborhood { radius: 0.9, cap: 12 };
        StackBuilder::new(2, hood)
            .deform(4, g.clone())
            .relu()
            .separable(3, g)
            .concat(0)
            .pcc(4, &[5, 6])
            .max_pool()
            .linear(3)
            .build(&mut seeded(1))
            .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample();
        let bytes = to_bytes(&s);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = to_bytes(&sample());
        let e = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(e.to_string().contains("payload has"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn bad_header_fields_are_named() {
        let text = String::from_utf8_lossy(&to_bytes(&sample())).into_owned();
        let cut = text.find("\n\n").unwrap();
        let header = &text[..cut + 2];
        let payload = &to_bytes(&sample())[cut + 2..];
        let mutate = |from: &str, to: &str| {
            let mut b = header.replacen(from, to, 1).into_bytes();
            b.extend_from_slice(payload);
            from_bytes(&b).unwrap_err().to_string()
        };
        assert!(mutate("version = 1", "version = 2").contains("`version`"));
        assert!(mutate("deform in=2", "deform in=3").contains("`params`"));
        assert!(mutate("k=3", "k=4").contains("`layer.0`"));
        assert!(mutate("relu", "gelu").contains("`layer.1`"));
        assert!(from_bytes(b"DFC2\n").unwrap_err().to_string().contains("`magic`"));
    }
}
