//! `.npcg`: magic `NPCG`, version, `u64` JSON length, JSON body.
//!
//! Per cluster the body stores the abstract path, the member sample ids,
//! `member_bits` (base64 of every member's path bitset as little-endian
//! `u64` words) and `member_acts` (base64 of little-endian `f32`, member
//! by member, layer by layer, in abstract-unit order).

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use npc_core::abstraction::{
    layer_offsets, AbstractPath, Cluster, DecisionGraph, GraphParams, PathVector,
};
use npc_core::bitset::BitSet;
use npc_core::Model;
use serde::{Deserialize, Serialize};

use super::{
    f32s_le, hash_hex, parse_hash, read_f32s, write_header, write_json, FormatError, FormatResult,
    Reader,
};

const MAGIC: &[u8; 4] = b"NPCG";

#[derive(Debug, Serialize, Deserialize)]
struct Body {
    model_hash: String,
    params: Params,
    classes: Vec<ClassEntry>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Params {
    alpha: f64,
    k: usize,
    beta: f64,
    #[serde(default)]
    input_neurons: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassEntry {
    class: usize,
    clusters: Vec<ClusterEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterEntry {
    #[serde(rename = "abstract")]
    abstract_path: Vec<AbstractLayer>,
    members: Vec<usize>,
    member_bits: String,
    member_acts: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct AbstractLayer {
    layer: usize,
    units: Vec<usize>,
    weights: Vec<f64>,
}

pub fn save_graph(graph: &DecisionGraph) -> Vec<u8> {
    let classes = graph
        .classes
        .iter()
        .enumerate()
        .map(|(class, clusters)| ClassEntry {
            class,
            clusters: clusters.iter().map(cluster_entry).collect(),
        })
        .collect();
    let body = Body {
        model_hash: hash_hex(graph.model_hash),
        params: Params {
            alpha: graph.params.alpha,
            k: graph.params.k,
            beta: graph.params.beta,
            input_neurons: graph.params.input_neurons,
        },
        classes,
    };
    let mut out = Vec::new();
    write_header(&mut out, MAGIC);
    write_json(&mut out, &body);
    out
}

fn cluster_entry(c: &Cluster) -> ClusterEntry {
    let mut bits = Vec::new();
    for p in &c.member_paths {
        for w in p.bits().words() {
            bits.extend_from_slice(&w.to_le_bytes());
        }
    }
    let mut acts = Vec::new();
    for row in &c.member_acts {
        f32s_le(row.iter().copied(), &mut acts);
    }
    ClusterEntry {
        abstract_path: c
            .abstract_path
            .layers
            .iter()
            .enumerate()
            .map(|(layer, units)| AbstractLayer {
                layer,
                units: units.iter().map(|&(u, _)| u).collect(),
                weights: units.iter().map(|&(_, w)| w).collect(),
            })
            .collect(),
        members: c.members.clone(),
        member_bits: B64.encode(bits),
        member_acts: B64.encode(acts),
    }
}

/// Graph parameters (including the input-neuron flag the model must carry)
/// without decoding the clusters.
pub fn peek_graph_params(bytes: &[u8]) -> FormatResult<GraphParams> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, "decision graph (.npcg)")?;
    let body: Body = r.json("graph body")?;
    Ok(to_params(body.params))
}

fn to_params(p: Params) -> GraphParams {
    GraphParams {
        alpha: p.alpha,
        k: p.k,
        beta: p.beta,
        input_neurons: p.input_neurons,
    }
}

/// Decodes a graph for `model`, refusing graphs built from another model.
pub fn load_graph(bytes: &[u8], model: &Model) -> FormatResult<DecisionGraph> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, "decision graph (.npcg)")?;
    let body_at = r.pos() + 8;
    let body: Body = r.json("graph body")?;
    r.finish()?;
    let invalid = |message: String| FormatError::Invalid {
        offset: body_at,
        message,
    };
    let expected = parse_hash(&body.model_hash)
        .ok_or_else(|| invalid("model_hash is not 16 hex digits".into()))?;
    if expected != model.content_hash() {
        return Err(FormatError::HashMismatch {
            expected,
            found: model.content_hash(),
        });
    }
    let params = to_params(body.params);
    GraphParams::new(params.alpha, params.k, params.beta)?;
    if params.input_neurons != model.input_neurons() {
        return Err(invalid(format!(
            "graph expects input neurons {}, model is set to {}",
            params.input_neurons,
            model.input_neurons()
        )));
    }
    if body.classes.len() != model.class_count() {
        return Err(invalid(format!(
            "graph has {} classes, model {}",
            body.classes.len(),
            model.class_count()
        )));
    }
    let offsets = layer_offsets(model);
    let layers = model.coverage_layer_count();
    let classes = body
        .classes
        .into_iter()
        .enumerate()
        .map(|(class, entry)| {
            if entry.class != class || entry.clusters.len() != params.k {
                return Err(invalid(format!("class entry {class} is malformed")));
            }
            entry
                .clusters
                .into_iter()
                .enumerate()
                .map(|(cluster, c)| {
                    decode_cluster(c, class, cluster, &params, &offsets, layers, model)
                        .map_err(&invalid)
                })
                .collect()
        })
        .collect::<FormatResult<Vec<Vec<Cluster>>>>()?;
    Ok(DecisionGraph {
        model_hash: expected,
        params,
        classes,
    })
}

fn decode_cluster(
    c: ClusterEntry,
    class: usize,
    cluster: usize,
    params: &GraphParams,
    offsets: &[usize],
    layers: usize,
    model: &Model,
) -> Result<Cluster, String> {
    let at = format!("class {class} cluster {cluster}");
    if c.abstract_path.len() != layers {
        return Err(format!(
            "{at}: abstract path spans {} layers, model has {layers}",
            c.abstract_path.len()
        ));
    }
    let mut abstract_layers = Vec::with_capacity(layers);
    for (l, al) in c.abstract_path.into_iter().enumerate() {
        let ascending = al.units.windows(2).all(|w| w[0] < w[1]);
        let in_range = al.units.iter().all(|&u| u < model.neuron_count(l));
        let weights_ok = al.weights.iter().all(|&w| w > params.beta && w <= 1.0);
        if al.layer != l
            || al.units.len() != al.weights.len()
            || !ascending
            || !in_range
            || !weights_ok
        {
            return Err(format!("{at}: abstract layer {l} is malformed"));
        }
        abstract_layers.push(al.units.into_iter().zip(al.weights).collect::<Vec<_>>());
    }
    let abstract_path = AbstractPath {
        layers: abstract_layers,
        beta: params.beta,
    };

    let n = c.members.len();
    if !c.members.windows(2).all(|w| w[0] < w[1]) {
        return Err(format!("{at}: member ids must be ascending"));
    }
    let total = offsets[offsets.len() - 1];
    let words = total.div_ceil(64);
    let bits = B64
        .decode(&c.member_bits)
        .map_err(|e| format!("{at}: member_bits: {e}"))?;
    if bits.len() != n * words * 8 {
        return Err(format!(
            "{at}: member_bits holds {} bytes, expected {}",
            bits.len(),
            n * words * 8
        ));
    }
    let member_paths = (0..n)
        .map(|i| {
            let chunk = &bits[i * words * 8..(i + 1) * words * 8];
            let w: Vec<u64> = chunk
                .chunks_exact(8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let set = BitSet::from_words(total, w)
                .ok_or_else(|| format!("{at}: member bits set past the neuron count"))?;
            PathVector::from_bits(set, offsets.to_vec()).map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let width = abstract_path.neuron_count();
    let acts = B64
        .decode(&c.member_acts)
        .map_err(|e| format!("{at}: member_acts: {e}"))?;
    if acts.len() != n * width * 4 {
        return Err(format!(
            "{at}: member_acts holds {} bytes, expected {}",
            acts.len(),
            n * width * 4
        ));
    }
    let values = read_f32s(&acts);
    let member_acts = (0..n)
        .map(|i| values[i * width..(i + 1) * width].to_vec())
        .collect();
    Ok(Cluster {
        class,
        cluster,
        members: c.members,
        member_paths,
        member_acts,
        abstract_path,
    })
}
