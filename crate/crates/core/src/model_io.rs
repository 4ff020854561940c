//! On-disk formats: model description text, MRFW weights, MRFD datasets.
//!
//! All multi-byte fields are little-endian; weights are stored only as f32
//! (quantized execution is simulated downstream). Save/load round trips
//! are bit-exact.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fixture;
use crate::graph::{Graph, LayerKind, LayerNode};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MRFW";
pub const WEIGHTS_VERSION: u32 = 1;
pub const DATASET_MAGIC: &[u8; 4] = b"MRFD";

/// Labeled evaluation samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<(u16, Tensor)>,
}

impl Dataset {
    pub fn inputs(&self) -> Vec<Tensor> {
        self.samples.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn truncated(&self, limit: usize) -> Dataset {
        Dataset { samples: self.samples.iter().take(limit).cloned().collect() }
    }
}

// --- model description text ------------------------------------------------

fn fmt_layer(layer: &LayerNode) -> String {
    let path = &layer.path;
    match &layer.kind {
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let k = if kernel.0 == kernel.1 {
                kernel.0.to_string()
            } else {
                format!("{}x{}", kernel.0, kernel.1)
            };
            format!(
                "{path} conv2d in={in_channels} out={out_channels} kernel={k} stride={stride} padding={padding}"
            )
        }
        LayerKind::Linear { in_features, out_features } => {
            format!("{path} linear in={in_features} out={out_features}")
        }
        LayerKind::ReLU => format!("{path} relu"),
        LayerKind::MaxPool2d { kernel, stride } => {
            format!("{path} maxpool2d kernel={kernel} stride={stride}")
        }
        LayerKind::AvgPool2d { kernel, stride } => {
            format!("{path} avgpool2d kernel={kernel} stride={stride}")
        }
        LayerKind::Flatten => format!("{path} flatten"),
        LayerKind::Add { source } => format!("{path} add source={source}"),
        LayerKind::Softmax => format!("{path} softmax"),
    }
}

/// Serialize a graph's topology (one layer per line, weights not included).
pub fn write_model_desc(graph: &Graph) -> String {
    let shape: Vec<String> = graph.input_shape().iter().map(|d| d.to_string()).collect();
    let mut out = format!("input {}\n", shape.join("x"));
    for layer in graph.layers() {
        out.push_str(&fmt_layer(layer));
        out.push('\n');
    }
    out
}

fn parse_kv(tokens: &[&str], line: usize) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| {
            Error::Load(format!("model desc line {line}: expected key=value, got {tok:?}"))
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn req_usize(map: &HashMap<String, String>, key: &str, line: usize) -> Result<usize> {
    map.get(key)
        .ok_or_else(|| Error::Load(format!("model desc line {line}: missing {key}")))?
        .parse()
        .map_err(|_| Error::Load(format!("model desc line {line}: malformed {key}")))
}

fn parse_kernel(map: &HashMap<String, String>, line: usize) -> Result<(usize, usize)> {
    let raw = map
        .get("kernel")
        .ok_or_else(|| Error::Load(format!("model desc line {line}: missing kernel")))?;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Load(format!("model desc line {line}: malformed kernel")))
    };
    match raw.split_once('x') {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let k = parse(raw)?;
            Ok((k, k))
        }
    }
}

/// Parse a model description into layer skeletons and the input shape.
pub fn parse_model_desc(text: &str) -> Result<(Vec<LayerNode>, Vec<usize>)> {
    let mut layers = Vec::new();
    let mut input_shape: Option<Vec<usize>> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens[0] == "input" {
            if tokens.len() != 2 {
                return Err(Error::Load(format!(
                    "model desc line {line_no}: input directive needs one shape"
                )));
            }
            let dims: Vec<usize> = tokens[1]
                .split('x')
                .map(|s| {
                    s.parse().map_err(|_| {
                        Error::Load(format!("model desc line {line_no}: malformed input shape"))
                    })
                })
                .collect::<Result<_>>()?;
            input_shape = Some(dims);
            continue;
        }
        if tokens.len() < 2 {
            return Err(Error::Load(format!(
                "model desc line {line_no}: expected `path kind ...`"
            )));
        }
        let (path, kind_name) = (tokens[0], tokens[1]);
        let kv = parse_kv(&tokens[2..], line_no)?;
        let kind = match kind_name {
            "conv2d" => LayerKind::Conv2d {
                in_channels: req_usize(&kv, "in", line_no)?,
                out_channels: req_usize(&kv, "out", line_no)?,
                kernel: parse_kernel(&kv, line_no)?,
                stride: req_usize(&kv, "stride", line_no)?,
                padding: req_usize(&kv, "padding", line_no)?,
            },
            "linear" => LayerKind::Linear {
                in_features: req_usize(&kv, "in", line_no)?,
                out_features: req_usize(&kv, "out", line_no)?,
            },
            "relu" => LayerKind::ReLU,
            "maxpool2d" => LayerKind::MaxPool2d {
                kernel: req_usize(&kv, "kernel", line_no)?,
                stride: req_usize(&kv, "stride", line_no)?,
            },
            "avgpool2d" => LayerKind::AvgPool2d {
                kernel: req_usize(&kv, "kernel", line_no)?,
                stride: req_usize(&kv, "stride", line_no)?,
            },
            "flatten" => LayerKind::Flatten,
            "add" => LayerKind::Add {
                source: kv
                    .get("source")
                    .ok_or_else(|| {
                        Error::Load(format!("model desc line {line_no}: add needs source"))
                    })?
                    .clone(),
            },
            "softmax" => LayerKind::Softmax,
            _ => {
                return Err(Error::Load(format!(
                    "model desc line {line_no}: unknown layer kind {kind_name:?}"
                )))
            }
        };
        layers.push(LayerNode::new(path, kind));
    }
    let input_shape = input_shape
        .ok_or_else(|| Error::Load("model desc has no input directive".into()))?;
    Ok((layers, input_shape))
}

// --- weights binary --------------------------------------------------------

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Load("file truncated".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Serialize named f32 tensors in MRFW layout.
pub fn encode_weights(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let data = tensor.as_f32()?;
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(0); // dtype f32
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse an MRFW byte buffer into named tensors.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Load("bad weights magic (expected MRFW)".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Load(format!("unsupported weights version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Load("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != 0 {
            return Err(Error::Load(format!("unsupported dtype code {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_f32(shape, data)?));
    }
    Ok(out)
}

/// Write a graph's weights to an MRFW file (`<path>.weight` / `<path>.bias`
/// entries in layer order).
pub fn save_weights(graph: &Graph, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for layer in graph.layers() {
        if let Some(w) = &layer.weight {
            tensors.push((format!("{}.weight", layer.path), w));
        }
        if let Some(b) = &layer.bias {
            tensors.push((format!("{}.bias", layer.path), b));
        }
    }
    fs::write(path, encode_weights(&tensors)?)?;
    Ok(())
}

/// Load a model from its description and weights files.
pub fn load_model(desc_path: &Path, weights_path: &Path) -> Result<Graph> {
    let text = fs::read_to_string(desc_path)?;
    let (mut layers, input_shape) = parse_model_desc(&text)?;
    let bytes = fs::read(weights_path)?;
    let mut tensors: HashMap<String, Tensor> = decode_weights(&bytes)?.into_iter().collect();
    for layer in &mut layers {
        if layer.kind.is_weighted() {
            let wname = format!("{}.weight", layer.path);
            let weight = tensors.remove(&wname).ok_or_else(|| {
                Error::Load(format!("weights file has no tensor {wname}"))
            })?;
            layer.weight = Some(weight);
            if let Some(bias) = tensors.remove(&format!("{}.bias", layer.path)) {
                layer.bias = Some(bias);
            }
        }
    }
    Graph::new(layers, input_shape)
        .map_err(|e| Error::Load(format!("weights do not match model: {e}")))
}

// --- dataset binary ---------------------------------------------------------

/// Write labeled samples in MRFD layout.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(dataset.samples.len() as u32).to_le_bytes());
    for (label, tensor) in &dataset.samples {
        out.extend_from_slice(&label.to_le_bytes());
        for v in tensor.as_f32()? {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read an MRFD file, binding samples to the given input shape.
pub fn load_dataset(path: &Path, input_shape: &[usize]) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut r = Reader { data: &bytes, pos: 0 };
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Load("bad dataset magic (expected MRFD)".into()));
    }
    let count = r.u32()? as usize;
    let pixels: usize = input_shape.iter().product();
    let expected = 8 + count * (2 + pixels * 4);
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "dataset size {} does not match {count} samples of {pixels} pixels",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let label = r.u16()?;
        let raw = r.take(pixels * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push((label, Tensor::from_f32(input_shape.to_vec(), data)?));
    }
    Ok(Dataset { samples })
}

// --- fixture generation -----------------------------------------------------

pub const FIXTURE_SAMPLES: usize = 256;

/// Deterministically generate the fixture model, weights, and self-labeled
/// dataset under `dir`. Returns (model, weights, dataset) paths. The same
/// seed produces byte-identical files.
pub fn generate_fixture(seed: u64, dir: &Path) -> Result<[std::path::PathBuf; 3]> {
    fs::create_dir_all(dir)?;
    let graph = fixture::lenet_graph(seed);
    let samples = fixture::self_labeled(&graph, fixture::fixture_inputs(seed, FIXTURE_SAMPLES));
    let model_path = dir.join("model.txt");
    let weights_path = dir.join("weights.mrfw");
    let data_path = dir.join("data.mrfd");
    fs::write(&model_path, write_model_desc(&graph))?;
    save_weights(&graph, &weights_path)?;
    save_dataset(&Dataset { samples }, &data_path)?;
    Ok([model_path, weights_path, data_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{argmax, lenet_graph, residual_graph};
    use crate::graph::forward_simple;

    #[test]
    fn desc_round_trip_both_fixtures() {
        for graph in [lenet_graph(5), residual_graph(5)] {
            let text = write_model_desc(&graph);
            let (layers, input_shape) = parse_model_desc(&text).unwrap();
            assert_eq!(input_shape, graph.input_shape());
            assert_eq!(layers.len(), graph.layers().len());
            for (a, b) in layers.iter().zip(graph.layers()) {
                assert_eq!(a.path, b.path);
                assert_eq!(a.kind, b.kind);
            }
        }
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let graph = lenet_graph(11);
        let wpath = dir.path().join("w.mrfw");
        save_weights(&graph, &wpath).unwrap();
        let mpath = dir.path().join("m.txt");
        std::fs::write(&mpath, write_model_desc(&graph)).unwrap();
        let loaded = load_model(&mpath, &wpath).unwrap();
        for (a, b) in graph.layers().iter().zip(loaded.layers()) {
            match (&a.weight, &b.weight) {
                (Some(x), Some(y)) => assert!(x.bits_eq(y)),
                (None, None) => {}
                _ => panic!("weight presence mismatch at {}", a.path),
            }
            match (&a.bias, &b.bias) {
                (Some(x), Some(y)) => assert!(x.bits_eq(y)),
                (None, None) => {}
                _ => panic!("bias presence mismatch at {}", a.path),
            }
        }
    }

    #[test]
    fn truncated_weights_are_a_load_error_not_a_partial_graph() {
        let dir = tempfile::tempdir().unwrap();
        let graph = lenet_graph(11);
        let wpath = dir.path().join("w.mrfw");
        save_weights(&graph, &wpath).unwrap();
        let bytes = std::fs::read(&wpath).unwrap();
        let cut = dir.path().join("cut.mrfw");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let mpath = dir.path().join("m.txt");
        std::fs::write(&mpath, write_model_desc(&graph)).unwrap();
        assert!(matches!(load_model(&mpath, &cut), Err(Error::Load(_))));
    }

    #[test]
    fn bad_magic_and_version_are_distinct_errors() {
        let graph = lenet_graph(11);
        let mut tensors = Vec::new();
        for l in graph.layers() {
            if let Some(w) = &l.weight {
                tensors.push((format!("{}.weight", l.path), w));
            }
        }
        let good = encode_weights(&tensors).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[..4].copy_from_slice(b"XXXX");
        let err = decode_weights(&bad_magic).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let mut bad_version = good;
        bad_version[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = decode_weights(&bad_version).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn missing_weight_tensor_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let graph = lenet_graph(11);
        // drop fc2's weight from the file
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for l in graph.layers() {
            if let Some(w) = &l.weight {
                if l.path != "model.fc2" {
                    tensors.push((format!("{}.weight", l.path), w));
                }
            }
        }
        let wpath = dir.path().join("w.mrfw");
        std::fs::write(&wpath, encode_weights(&tensors).unwrap()).unwrap();
        let mpath = dir.path().join("m.txt");
        std::fs::write(&mpath, write_model_desc(&graph)).unwrap();
        let err = load_model(&mpath, &wpath).unwrap_err().to_string();
        assert!(err.contains("model.fc2.weight"), "{err}");
    }

    #[test]
    fn fixture_generation_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = generate_fixture(42, a.path()).unwrap();
        let pb = generate_fixture(42, b.path()).unwrap();
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let c = tempfile::tempdir().unwrap();
        let pc = generate_fixture(43, c.path()).unwrap();
        assert_ne!(
            std::fs::read(&pa[1]).unwrap(),
            std::fs::read(&pc[1]).unwrap(),
            "different seeds give different weights"
        );
    }

    #[test]
    fn fixture_loads_back_and_is_perfectly_labeled() {
        let dir = tempfile::tempdir().unwrap();
        let [m, w, d] = generate_fixture(42, dir.path()).unwrap();
        let graph = load_model(&m, &w).unwrap();
        assert_eq!(graph.layers().len(), 10);
        let dataset = load_dataset(&d, graph.input_shape()).unwrap();
        assert_eq!(dataset.samples.len(), FIXTURE_SAMPLES);
        let mut correct = 0usize;
        for (label, input) in &dataset.samples {
            let logits = forward_simple(&graph, input).unwrap();
            if argmax(logits.as_f32().unwrap()) as u16 == *label {
                correct += 1;
            }
        }
        assert_eq!(correct, FIXTURE_SAMPLES, "golden accuracy is 100% by construction");
    }
}
