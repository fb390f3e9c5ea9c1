//! Network persistence: a JSON node list describing the topology plus a
//! plain-text parameter blob it references.
//!
//! The JSON file carries kinds, shapes, and incoming edges; parameters live
//! in a sibling text file as named matrix/kernel blocks in node-id order.
//! Floats are written in shortest round-trip form, so save → load is exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{format_matrix, format_tensor4, parse_matrix, parse_tensor4, Matrix};

use super::{EdgeShape, Network, NetworkBuilder, NodeId, NodeSpec, NonlinKind};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFile {
    /// Parameter blob path, relative to the JSON file.
    params: String,
    nodes: Vec<NodeDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ShapeDto {
    Vec { vec: usize },
    Img { img: [usize; 3] },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum NodeDto {
    Input {
        shape: ShapeDto,
    },
    Dense {
        inputs: Vec<NodeId>,
        rows: usize,
        cols: usize,
        bias: bool,
    },
    Conv2d {
        inputs: Vec<NodeId>,
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Nonlin {
        inputs: Vec<NodeId>,
        #[serde(rename = "fn")]
        func: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        slope: Option<f64>,
    },
    Add {
        inputs: Vec<NodeId>,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Split {
        inputs: Vec<NodeId>,
        start: usize,
        len: usize,
    },
    Permute {
        inputs: Vec<NodeId>,
        perm: Vec<usize>,
    },
    AffineGain {
        inputs: Vec<NodeId>,
        dim: usize,
    },
    Flatten {
        inputs: Vec<NodeId>,
    },
    Output {
        inputs: Vec<NodeId>,
    },
    SoftmaxXentOutput {
        inputs: Vec<NodeId>,
    },
}

fn bias_as_row(b: &[f64]) -> Matrix {
    Matrix::from_vec_unchecked(1, b.len(), b.to_vec())
}

/// Serializes the topology to `<stem>.json` and parameters to
/// `<stem>.params.txt` next to it. Returns the JSON path.
pub fn save_network(net: &Network, dir: &Path, stem: &str) -> Result<PathBuf> {
    let mut dtos = Vec::with_capacity(net.nodes().len());
    let mut blob = String::new();
    for (id, node) in net.nodes().iter().enumerate() {
        let inputs = node.inputs.clone();
        let dto = match &node.spec {
            NodeSpec::Input => NodeDto::Input {
                shape: match node.shape {
                    EdgeShape::Vec(n) => ShapeDto::Vec { vec: n },
                    EdgeShape::Img { c, h, w } => ShapeDto::Img { img: [c, h, w] },
                },
            },
            NodeSpec::Dense { w, b } => {
                blob.push_str(&format!("node {id} w\n{}", format_matrix(w)));
                if let Some(b) = b {
                    blob.push_str(&format!("node {id} b\n{}", format_matrix(&bias_as_row(b))));
                }
                NodeDto::Dense {
                    inputs,
                    rows: w.rows(),
                    cols: w.cols(),
                    bias: b.is_some(),
                }
            }
            NodeSpec::Conv2d {
                k,
                b,
                stride,
                padding,
            } => {
                blob.push_str(&format!("node {id} k\n{}", format_tensor4(k)));
                if let Some(b) = b {
                    blob.push_str(&format!("node {id} b\n{}", format_matrix(&bias_as_row(b))));
                }
                let (c_out, c_in, kh, kw) = k.dims();
                NodeDto::Conv2d {
                    inputs,
                    c_out,
                    c_in,
                    kh,
                    kw,
                    stride: *stride,
                    padding: *padding,
                    bias: b.is_some(),
                }
            }
            NodeSpec::Nonlin(kind) => {
                let (func, slope) = match kind {
                    NonlinKind::ReLU => ("relu", None),
                    NonlinKind::LeakyReLU(s) => ("leaky_relu", Some(*s)),
                    NonlinKind::Abs => ("abs", None),
                };
                NodeDto::Nonlin {
                    inputs,
                    func: func.into(),
                    slope,
                }
            }
            NodeSpec::Add => NodeDto::Add { inputs },
            NodeSpec::Concat => NodeDto::Concat { inputs },
            NodeSpec::Split { start, len } => NodeDto::Split {
                inputs,
                start: *start,
                len: *len,
            },
            NodeSpec::Permute { perm } => NodeDto::Permute {
                inputs,
                perm: perm.clone(),
            },
            NodeSpec::AffineGain { a, c } => {
                blob.push_str(&format!("node {id} a\n{}", format_matrix(&bias_as_row(a))));
                blob.push_str(&format!("node {id} c\n{}", format_matrix(&bias_as_row(c))));
                NodeDto::AffineGain {
                    inputs,
                    dim: a.len(),
                }
            }
            NodeSpec::Flatten => NodeDto::Flatten { inputs },
            NodeSpec::Output => NodeDto::Output { inputs },
            NodeSpec::SoftmaxXentOutput => NodeDto::SoftmaxXentOutput { inputs },
        };
        dtos.push(dto);
    }
    let params_name = format!("{stem}.params.txt");
    let file = NetFile {
        params: params_name.clone(),
        nodes: dtos,
    };
    fs::create_dir_all(dir)?;
    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(&json_path, json + "\n")?;
    fs::write(dir.join(params_name), blob)?;
    Ok(json_path)
}

/// Splits the parameter blob into per-(node, field) text blocks.
fn parse_blob(blob: &str) -> Result<Vec<(NodeId, String, String)>> {
    let mut blocks = Vec::new();
    let mut header: Option<(NodeId, String)> = None;
    let mut body = String::new();
    for line in blob.lines() {
        if let Some(rest) = line.strip_prefix("node ") {
            if let Some((id, field)) = header.take() {
                blocks.push((id, field, std::mem::take(&mut body)));
            }
            let mut parts = rest.split_whitespace();
            let id: NodeId = parts
                .next()
                .ok_or_else(|| Error::Parse("parameter block missing node id".into()))?
                .parse()
                .map_err(|e| Error::Parse(format!("bad node id: {e}")))?;
            let field = parts
                .next()
                .ok_or_else(|| Error::Parse("parameter block missing field name".into()))?
                .to_string();
            header = Some((id, field));
        } else {
            if header.is_none() && !line.trim().is_empty() {
                return Err(Error::Parse("parameter blob must start with a block header".into()));
            }
            body.push_str(line);
            body.push('\n');
        }
    }
    if let Some((id, field)) = header {
        blocks.push((id, field, body));
    }
    Ok(blocks)
}

fn take_block<'a>(
    blocks: &'a [(NodeId, String, String)],
    id: NodeId,
    field: &str,
) -> Result<&'a str> {
    blocks
        .iter()
        .find(|(bid, bfield, _)| *bid == id && bfield == field)
        .map(|(_, _, body)| body.as_str())
        .ok_or_else(|| Error::Parse(format!("missing parameter block `node {id} {field}`")))
}

fn row_vec(m: Matrix, id: NodeId, field: &str, len: usize) -> Result<Vec<f64>> {
    if m.rows() != 1 || m.cols() != len {
        return Err(Error::Parse(format!(
            "block `node {id} {field}` must be 1x{len}"
        )));
    }
    Ok(m.data().to_vec())
}

/// Loads a network saved by [`save_network`], re-running all builder
/// validation on the way in.
pub fn load_network(json_path: &Path) -> Result<Network> {
    let text = fs::read_to_string(json_path)?;
    let file: NetFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("network json: {e}")))?;
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let blob = fs::read_to_string(dir.join(&file.params))?;
    let blocks = parse_blob(&blob)?;

    if file.nodes.is_empty() {
        return Err(Error::Parse("network has no nodes".into()));
    }
    let mut builder = match &file.nodes[0] {
        NodeDto::Input { shape } => match shape {
            ShapeDto::Vec { vec } => NetworkBuilder::vector_input(*vec)?,
            ShapeDto::Img { img } => NetworkBuilder::image_input(img[0], img[1], img[2])?,
        },
        _ => return Err(Error::Parse("first node must be the input".into())),
    };

    let one_input = |inputs: &[NodeId]| -> Result<NodeId> {
        if inputs.len() != 1 {
            return Err(Error::Parse("node requires exactly one input".into()));
        }
        Ok(inputs[0])
    };

    let last = file.nodes.len() - 1;
    for (id, dto) in file.nodes.iter().enumerate().skip(1) {
        let terminal = matches!(dto, NodeDto::Output { .. } | NodeDto::SoftmaxXentOutput { .. });
        if terminal != (id == last) {
            return Err(Error::Parse(
                "exactly the final node must be an output node".into(),
            ));
        }
        match dto {
            NodeDto::Input { .. } => {
                return Err(Error::Parse("only the first node may be the input".into()));
            }
            NodeDto::Dense {
                inputs,
                rows,
                cols,
                bias,
            } => {
                let w = parse_matrix(take_block(&blocks, id, "w")?)?;
                if w.shape() != (*rows, *cols) {
                    return Err(Error::Parse(format!(
                        "dense block for node {id} is {:?}, json says ({rows}, {cols})",
                        w.shape()
                    )));
                }
                let b = if *bias {
                    Some(row_vec(parse_matrix(take_block(&blocks, id, "b")?)?, id, "b", *rows)?)
                } else {
                    None
                };
                builder.dense(one_input(inputs)?, w, b)?;
            }
            NodeDto::Conv2d {
                inputs,
                c_out,
                c_in,
                kh,
                kw,
                stride,
                padding,
                bias,
            } => {
                let k = parse_tensor4(take_block(&blocks, id, "k")?)?;
                if k.dims() != (*c_out, *c_in, *kh, *kw) {
                    return Err(Error::Parse(format!(
                        "kernel block for node {id} is {:?}, json disagrees",
                        k.dims()
                    )));
                }
                let b = if *bias {
                    Some(row_vec(parse_matrix(take_block(&blocks, id, "b")?)?, id, "b", *c_out)?)
                } else {
                    None
                };
                builder.conv2d(one_input(inputs)?, k, b, *stride, *padding)?;
            }
            NodeDto::Nonlin { inputs, func, slope } => {
                let kind = match (func.as_str(), slope) {
                    ("relu", None) => NonlinKind::ReLU,
                    ("leaky_relu", Some(s)) => NonlinKind::LeakyReLU(*s),
                    ("abs", None) => NonlinKind::Abs,
                    _ => {
                        return Err(Error::Parse(format!(
                            "unknown nonlinearity `{func}` (or bad slope)"
                        )));
                    }
                };
                builder.nonlin(one_input(inputs)?, kind)?;
            }
            NodeDto::Add { inputs } => {
                if inputs.len() != 2 {
                    return Err(Error::Parse("add requires exactly two inputs".into()));
                }
                builder.add(inputs[0], inputs[1])?;
            }
            NodeDto::Concat { inputs } => {
                builder.concat(inputs)?;
            }
            NodeDto::Split { inputs, start, len } => {
                builder.split(one_input(inputs)?, &[(*start, *len)])?;
            }
            NodeDto::Permute { inputs, perm } => {
                builder.permute(one_input(inputs)?, perm.clone())?;
            }
            NodeDto::AffineGain { inputs, dim } => {
                let a = row_vec(parse_matrix(take_block(&blocks, id, "a")?)?, id, "a", *dim)?;
                let c = row_vec(parse_matrix(take_block(&blocks, id, "c")?)?, id, "c", *dim)?;
                builder.affine_gain(one_input(inputs)?, a, c)?;
            }
            NodeDto::Flatten { inputs } => {
                builder.flatten(one_input(inputs)?)?;
            }
            NodeDto::Output { inputs } => {
                return builder.output(one_input(inputs)?);
            }
            NodeDto::SoftmaxXentOutput { inputs } => {
                return builder.softmax_xent_output(one_input(inputs)?);
            }
        }
    }
    Err(Error::Parse("network json has no terminal output node".into()))
}
