//! Two-file model format: a UTF-8 manifest describing topology, shapes and
//! quantization parameters, and a little-endian blob holding every tensor
//! back to back followed by a CRC-32 of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{
    BatchNormParams, ConvParams, ConvQuant, InputSpec, Layer, ModelGraph, Node, Preprocess, ValueRef,
};
use crate::error::{Error, Result};
use crate::manifest::{
    expect_header, format_list, format_qparams, parse_list, parse_qparams, parse_records, write_records,
    Record,
};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &str = "FCNQ1";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    F32,
    I8,
    I32,
    I64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::I8 => "i8",
            Dtype::I32 => "i32",
            Dtype::I64 => "i64",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "f32" => Dtype::F32,
            "i8" => Dtype::I8,
            "i32" => Dtype::I32,
            "i64" => Dtype::I64,
            _ => return Err(Error::Format(format!("unknown dtype `{s}`"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::I8 => 1,
            Dtype::I64 => 8,
        }
    }
}

enum Payload {
    Real(Vec<f32>),
    Int(Vec<i64>),
}

struct BlobWriter {
    bytes: Vec<u8>,
    records: Vec<Record>,
}

impl BlobWriter {
    fn real(&mut self, node: usize, role: &str, shape: &[usize], data: &[f32]) {
        self.header(node, role, Dtype::F32, shape);
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn int(&mut self, node: usize, role: &str, shape: &[usize], data: &[i64]) {
        let fits = |lo: i64, hi: i64| data.iter().all(|&v| v >= lo && v <= hi);
        let dtype = if fits(i8::MIN as i64, i8::MAX as i64) {
            Dtype::I8
        } else if fits(i32::MIN as i64, i32::MAX as i64) {
            Dtype::I32
        } else {
            Dtype::I64
        };
        self.header(node, role, dtype, shape);
        for &v in data {
            match dtype {
                Dtype::I8 => self.bytes.push(v as i8 as u8),
                Dtype::I32 => self.bytes.extend_from_slice(&(v as i32).to_le_bytes()),
                Dtype::I64 => self.bytes.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => unreachable!(),
            }
        }
    }

    fn header(&mut self, node: usize, role: &str, dtype: Dtype, shape: &[usize]) {
        self.records.push(
            Record::new("tensor")
                .arg(node)
                .set("role", role)
                .set("dtype", dtype.name())
                .set("offset", self.bytes.len())
                .set("shape", format_list(shape, 'x')),
        );
    }
}

fn value_ref_text(r: &ValueRef) -> String {
    match r {
        ValueRef::Input => "input".into(),
        ValueRef::Node(i) => i.to_string(),
    }
}

/// Writes `path` (manifest) and a sibling `.bin` blob.
pub fn save_model(m: &ModelGraph, path: &Path) -> Result<()> {
    let blob_path = path.with_extension("bin");
    let blob_name = blob_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("bad model path {}", path.display())))?
        .to_string();

    let mut head = vec![
        Record::new(MODEL_MAGIC).arg(MODEL_VERSION),
        Record::new("input")
            .set("height", m.input.height)
            .set("width", m.input.width)
            .set("channels", m.input.channels),
        Record::new("classes").arg(m.num_classes),
    ];
    let mut pre = Record::new("preprocess")
        .set("l1", m.preprocess.l1_normalize as u8)
        .set("rescale", m.preprocess.rescale as u8);
    if let Some(clip) = &m.preprocess.clip {
        pre = pre.set("clip", format_list(clip, ','));
    }
    head.push(pre);
    if let Some(q) = &m.input_quant {
        head.push(Record::new("input_quant").set("q", format_qparams(q)));
    }

    let mut blob = BlobWriter {
        bytes: Vec::new(),
        records: Vec::new(),
    };
    let mut body = Vec::new();
    for (i, n) in m.nodes.iter().enumerate() {
        let inputs: Vec<String> = n.inputs.iter().map(value_ref_text).collect();
        let mut rec = Record::new("node")
            .arg(i)
            .set("name", &n.name)
            .set("kind", n.layer.kind_name())
            .set("inputs", inputs.join(","));
        if let Some(q) = &n.act_quant {
            rec = rec.set("act", format_qparams(q));
        }
        if let Layer::BatchNorm(bn) = &n.layer {
            rec = rec.set("eps", bn.eps);
        }
        body.push(rec);
        match &n.layer {
            Layer::Conv2d(p) | Layer::TransposedConv2x2(p) | Layer::Classifier(p) => {
                blob.real(i, "weight", p.weight.shape(), p.weight.data());
                blob.real(i, "bias", &[p.bias.len()], &p.bias);
                if let Some(q) = &p.quant {
                    body.push(
                        Record::new("cq")
                            .arg(i)
                            .set("input", format_qparams(&q.input))
                            .set("weight", format_qparams(&q.weight))
                            .set("bias", format_qparams(&q.bias)),
                    );
                    let w: Vec<i64> = q.weight_int.data().iter().map(|&v| v as i64).collect();
                    blob.int(i, "weight_int", q.weight_int.shape(), &w);
                    blob.int(i, "bias_int", &[q.bias_int.len()], &q.bias_int);
                }
            }
            Layer::BatchNorm(bn) => {
                let c = [bn.channels()];
                blob.real(i, "gamma", &c, &bn.gamma);
                blob.real(i, "beta", &c, &bn.beta);
                blob.real(i, "mean", &c, &bn.mean);
                blob.real(i, "var", &c, &bn.var);
            }
            _ => {}
        }
    }
    let crc = crc32fast::hash(&blob.bytes);
    head.push(
        Record::new("blob")
            .set("file", &blob_name)
            .set("bytes", blob.bytes.len())
            .set("crc32", format!("{crc:08x}")),
    );
    let mut text = write_records(&head);
    text.push_str(&write_records(&body));
    text.push_str(&write_records(&blob.records));

    let mut bytes = blob.bytes;
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(&blob_path, bytes)?;
    fs::write(path, text)?;
    Ok(())
}

fn read_payload(payload: &[u8], rec: &Record) -> Result<(Vec<usize>, Payload)> {
    let dtype = Dtype::parse(rec.get("dtype")?)?;
    let offset: usize = rec.parse("offset")?;
    let shape: Vec<usize> = parse_list(rec.get("shape")?, 'x')?;
    let n: usize = shape.iter().product();
    let end = offset
        .checked_add(n * dtype.size())
        .ok_or_else(|| Error::Format("tensor extent overflows".into()))?;
    let bytes = payload
        .get(offset..end)
        .ok_or_else(|| Error::Truncated(format!("tensor at line {} runs past the blob", rec.line)))?;
    let data = match dtype {
        Dtype::F32 => Payload::Real(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I8 => Payload::Int(bytes.iter().map(|&b| b as i8 as i64).collect()),
        Dtype::I32 => Payload::Int(
            bytes
                .chunks_exact(4)
                .map(|b| i32::from_le_bytes(b.try_into().unwrap()) as i64)
                .collect(),
        ),
        Dtype::I64 => Payload::Int(
            bytes
                .chunks_exact(8)
                .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok((shape, data))
}

struct NodeTensors {
    map: BTreeMap<String, (Vec<usize>, Payload)>,
    node: String,
}

impl NodeTensors {
    fn take(&mut self, role: &str) -> Result<(Vec<usize>, Payload)> {
        self.map
            .remove(role)
            .ok_or_else(|| Error::Format(format!("node `{}` lacks tensor `{role}`", self.node)))
    }

    fn real(&mut self, role: &str) -> Result<Tensor<f32>> {
        match self.take(role)? {
            (shape, Payload::Real(v)) => Tensor::from_vec(shape, v),
            _ => Err(Error::Format(format!("`{role}` of `{}` must be f32", self.node))),
        }
    }

    fn vec(&mut self, role: &str) -> Result<Vec<f32>> {
        Ok(self.real(role)?.into_data())
    }

    fn int(&mut self, role: &str) -> Result<(Vec<usize>, Vec<i64>)> {
        match self.take(role)? {
            (shape, Payload::Int(v)) => Ok((shape, v)),
            _ => Err(Error::Format(format!("`{role}` of `{}` must be integer", self.node))),
        }
    }
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let text = fs::read_to_string(path)?;
    if text.is_empty() {
        return Err(Error::Truncated(format!("{} is empty", path.display())));
    }
    let records = parse_records(&text);
    let records = expect_header(&records, MODEL_MAGIC, MODEL_VERSION)?;
    let find = |tag: &str| records.iter().find(|r| r.tag == tag);
    let need = |tag: &str| find(tag).ok_or_else(|| Error::Format(format!("manifest lacks `{tag}`")));

    let blob_rec = need("blob")?;
    let blob_path = path.with_file_name(blob_rec.get("file")?);
    let declared: usize = blob_rec.parse("bytes")?;
    let declared_crc = u32::from_str_radix(blob_rec.get("crc32")?, 16)
        .map_err(|_| Error::Format("bad crc32 field".into()))?;
    let raw = fs::read(&blob_path)?;
    if raw.len() < declared + 4 {
        return Err(Error::Truncated(format!(
            "blob has {} bytes, manifest declares {} + checksum",
            raw.len(),
            declared
        )));
    }
    if raw.len() > declared + 4 {
        return Err(Error::Format("blob longer than declared".into()));
    }
    let (payload, tail) = raw.split_at(declared);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let found = crc32fast::hash(payload);
    if found != stored || found != declared_crc {
        return Err(Error::Checksum {
            expected: declared_crc,
            found,
        });
    }

    let inp = need("input")?;
    let input = InputSpec {
        height: inp.parse("height")?,
        width: inp.parse("width")?,
        channels: inp.parse("channels")?,
    };
    let num_classes: usize = need("classes")?.parse_arg(0)?;
    let mut m = ModelGraph::empty(input, num_classes);
    if let Some(p) = find("preprocess") {
        m.preprocess = Preprocess {
            l1_normalize: p.parse::<u8>("l1")? != 0,
            rescale: p.parse::<u8>("rescale")? != 0,
            clip: p.kv.get("clip").map(|s| parse_list(s, ',')).transpose()?,
        };
    }
    if let Some(q) = find("input_quant") {
        m.input_quant = Some(parse_qparams(q.get("q")?)?);
    }

    let node_recs: Vec<&Record> = records.iter().filter(|r| r.tag == "node").collect();
    let mut tensors: Vec<BTreeMap<String, (Vec<usize>, Payload)>> =
        (0..node_recs.len()).map(|_| BTreeMap::new()).collect();
    for rec in records.iter().filter(|r| r.tag == "tensor") {
        let idx: usize = rec.parse_arg(0)?;
        let slot = tensors
            .get_mut(idx)
            .ok_or_else(|| Error::Format(format!("tensor for unknown node {idx}")))?;
        slot.insert(rec.get("role")?.to_string(), read_payload(payload, rec)?);
    }
    let cq: BTreeMap<usize, &Record> = records
        .iter()
        .filter(|r| r.tag == "cq")
        .map(|r| Ok((r.parse_arg(0)?, r)))
        .collect::<Result<_>>()?;

    for (i, (rec, map)) in node_recs.iter().zip(tensors).enumerate() {
        if rec.parse_arg::<usize>(0)? != i {
            return Err(Error::Format(format!("node records out of order at line {}", rec.line)));
        }
        let name = rec.get("name")?.to_string();
        let inputs = rec
            .get("inputs")?
            .split(',')
            .map(|s| match s {
                "input" => Ok(ValueRef::Input),
                _ => s
                    .parse()
                    .map(ValueRef::Node)
                    .map_err(|_| Error::Format(format!("bad input reference `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut t = NodeTensors {
            map,
            node: name.clone(),
        };
        let conv = |t: &mut NodeTensors| -> Result<ConvParams> {
            let mut p = ConvParams::from_parts(t.real("weight")?, t.vec("bias")?)?;
            if let Some(q) = cq.get(&i) {
                let (wshape, w) = t.int("weight_int")?;
                let weight_int = Tensor::from_vec(wshape, w.into_iter().map(|v| v as i32).collect())?;
                p.quant = Some(ConvQuant {
                    input: parse_qparams(q.get("input")?)?,
                    weight: parse_qparams(q.get("weight")?)?,
                    bias: parse_qparams(q.get("bias")?)?,
                    weight_int,
                    bias_int: t.int("bias_int")?.1,
                });
            }
            Ok(p)
        };
        let layer = match rec.get("kind")? {
            "conv2d" => Layer::Conv2d(conv(&mut t)?),
            "tconv2x2" => Layer::TransposedConv2x2(conv(&mut t)?),
            "classifier" => Layer::Classifier(conv(&mut t)?),
            "batchnorm" => Layer::BatchNorm(BatchNormParams {
                gamma: t.vec("gamma")?,
                beta: t.vec("beta")?,
                mean: t.vec("mean")?,
                var: t.vec("var")?,
                eps: rec.parse("eps")?,
            }),
            "relu" => Layer::Relu,
            "maxpool2x2" => Layer::MaxPool2x2,
            "concat" => Layer::Concat,
            k => return Err(Error::Format(format!("unknown layer kind `{k}`"))),
        };
        let act_quant = rec.kv.get("act").map(|s| parse_qparams(s)).transpose()?;
        m.nodes.push(Node {
            name,
            layer,
            inputs,
            act_quant,
        });
    }
    m.validate()?;
    Ok(m)
}
