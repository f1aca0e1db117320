//! Aggregation of probed attention maps and weighted accumulated
//! self-attention (WAS) composition.
//!
//! The `*_graph` functions operate on autodiff nodes and are what the
//! optimizer differentiates through; the array functions wrap them for
//! inference and inspection.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, Array4, Axis};

use crate::autodiff::{Graph, Var};
use crate::backbone::{AttentionProbeSet, GraphProbes, ProbeMap};
use crate::error::{Error, Result};
use crate::imageops::bilinear_matrix;

/// Cross-attention maximum a class channel must exceed to enter WAS composition.
pub const DEFAULT_GATE: f64 = 0.2;

/// Common cross-attention resolution `(H'', W'')`.
pub const DEFAULT_TARGET: (usize, usize) = (64, 64);

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedAttention {
    /// `(H'', W'', T)`
    pub a_ca: Array3<f64>,
    /// `(h, w, h, w)`, query axes first.
    pub a_sa: Array4<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WasMapStack {
    /// K maps of shape `(h, w)`.
    pub maps: Vec<Array2<f64>>,
    pub gate_passed: Vec<bool>,
}

impl WasMapStack {
    pub fn num_classes(&self) -> usize {
        self.maps.len()
    }
}

/// WAS maps on a graph: `(h·w) × K`.
#[derive(Debug, Clone)]
pub struct GraphWas {
    pub maps: Var,
    pub height: usize,
    pub width: usize,
    pub gate_passed: Vec<bool>,
}

/// Bilinearly resizes every layer's cross-attention to `target` and averages.
pub fn aggregate_cross_graph(
    g: &mut Graph,
    probes: &GraphProbes,
    target: (usize, usize),
) -> Result<ProbeMap> {
    if probes.cross.is_empty() {
        return Err(Error::Aggregation("no cross-attention probes".into()));
    }
    let mut resized = Vec::with_capacity(probes.cross.len());
    let mut tokens = None;
    for (id, map) in &probes.cross {
        let t = g.shape(map.var).1;
        if *tokens.get_or_insert(t) != t {
            return Err(Error::Aggregation(format!("layer {id} has {t} tokens")));
        }
        if (map.height, map.width) == target {
            resized.push(map.var);
        } else {
            let m = Arc::new(bilinear_matrix((map.height, map.width), target));
            resized.push(g.sparse_left(m, map.var));
        }
    }
    let var = g.mean(&resized);
    Ok(ProbeMap {
        var,
        height: target.0,
        width: target.1,
    })
}

/// Averages self-attention maps over layers; all layers must share one shape.
pub fn aggregate_self_graph(g: &mut Graph, probes: &GraphProbes) -> Result<ProbeMap> {
    let mut iter = probes.self_attention.iter();
    let Some((_, first)) = iter.next() else {
        return Err(Error::Aggregation("no self-attention probes".into()));
    };
    let mut parts = vec![first.var];
    for (id, map) in iter {
        if (map.height, map.width) != (first.height, first.width) {
            return Err(Error::Aggregation(format!(
                "self-attention layer {id} is {}×{}, expected {}×{}",
                map.height, map.width, first.height, first.width
            )));
        }
        parts.push(map.var);
    }
    Ok(ProbeMap {
        var: g.mean(&parts),
        height: first.height,
        width: first.width,
    })
}

/// Composes WAS maps for cross-attention channels `0..k`.
///
/// Channel `c` passes the gate when its pre-resize maximum exceeds `gate`.
/// Passing channels are resized to the self-attention grid (`R`) and
/// `S(x) = Σ_p R(p) · A_sa(p, x)`; failing channels are zero.
pub fn stack_was_graph(
    g: &mut Graph,
    a_ca: ProbeMap,
    a_sa: ProbeMap,
    k: usize,
    gate: f64,
) -> Result<GraphWas> {
    let tokens = g.shape(a_ca.var).1;
    if k == 0 || k > tokens {
        return Err(Error::ClassCount {
            k,
            capacity: tokens,
        });
    }
    let (h, w) = (a_sa.height, a_sa.width);
    if g.shape(a_sa.var) != (h * w, h * w) {
        return Err(Error::InputShape(
            "self-attention is not square over its grid".into(),
        ));
    }
    let channels = g.columns(a_ca.var, 0, k);
    let gate_passed: Vec<bool> = g
        .value(channels)
        .axis_iter(Axis(1))
        .map(|col| col.fold(f64::NEG_INFINITY, |m, &v| m.max(v)) > gate)
        .collect();
    let resized = if (a_ca.height, a_ca.width) == (h, w) {
        channels
    } else {
        let m = Arc::new(bilinear_matrix((a_ca.height, a_ca.width), (h, w)));
        g.sparse_left(m, channels)
    };
    let factors = gate_passed
        .iter()
        .map(|&p| if p { 1.0 } else { 0.0 })
        .collect();
    let gated = g.scale_columns(resized, factors);
    let maps = g.matmul_tn(a_sa.var, gated);
    Ok(GraphWas {
        maps,
        height: h,
        width: w,
        gate_passed,
    })
}

fn single_cross(g: &mut Graph, map: &Array3<f64>) -> ProbeMap {
    let (h, w, t) = map.dim();
    let var = g.constant(map.to_shape((h * w, t)).expect("contiguous").into_owned());
    ProbeMap {
        var,
        height: h,
        width: w,
    }
}

fn single_self(g: &mut Graph, map: &Array4<f64>) -> Result<ProbeMap> {
    let (h, w, h2, w2) = map.dim();
    if (h, w) != (h2, w2) {
        return Err(Error::InputShape(format!(
            "self-attention must be (h, w, h, w), got {:?}",
            map.dim()
        )));
    }
    let var = g.constant(
        map.to_shape((h * w, h * w))
            .expect("contiguous")
            .into_owned(),
    );
    Ok(ProbeMap {
        var,
        height: h,
        width: w,
    })
}

pub fn aggregate_cross(probes: &AttentionProbeSet, target: (usize, usize)) -> Result<Array3<f64>> {
    let mut g = Graph::new();
    let gp = GraphProbes::from_probe_set(&mut g, probes);
    let agg = aggregate_cross_graph(&mut g, &gp, target)?;
    let t = g.shape(agg.var).1;
    Ok(g.value(agg.var)
        .to_shape((target.0, target.1, t))
        .expect("aggregate shape")
        .into_owned())
}

pub fn aggregate_self(probes: &AttentionProbeSet) -> Result<Array4<f64>> {
    let mut g = Graph::new();
    let gp = GraphProbes::from_probe_set(&mut g, probes);
    let agg = aggregate_self_graph(&mut g, &gp)?;
    let (h, w) = (agg.height, agg.width);
    Ok(g.value(agg.var)
        .to_shape((h, w, h, w))
        .expect("aggregate shape")
        .into_owned())
}

pub fn aggregate(
    probes: &AttentionProbeSet,
    target: (usize, usize),
) -> Result<AggregatedAttention> {
    Ok(AggregatedAttention {
        a_ca: aggregate_cross(probes, target)?,
        a_sa: aggregate_self(probes)?,
    })
}

fn check_finite_nonnegative<'a>(
    values: impl IntoIterator<Item = &'a f64>,
    what: &str,
) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite() && *v >= 0.0) {
        Ok(())
    } else {
        Err(Error::InputShape(format!(
            "{what} must be finite and non-negative"
        )))
    }
}

/// WAS map of a single cross-attention channel `(H'', W'')`.
pub fn compose_was(
    a_ca_k: &Array2<f64>,
    a_sa: &Array4<f64>,
    gate: f64,
) -> Result<(Array2<f64>, bool)> {
    check_finite_nonnegative(a_ca_k, "cross-attention")?;
    check_finite_nonnegative(a_sa, "self-attention")?;
    let (h, w) = a_ca_k.dim();
    let mut g = Graph::new();
    let ca = single_cross(
        &mut g,
        &a_ca_k.to_shape((h, w, 1)).expect("contiguous").into_owned(),
    );
    let sa = single_self(&mut g, a_sa)?;
    let was = stack_was_graph(&mut g, ca, sa, 1, gate)?;
    let map = g
        .value(was.maps)
        .to_shape((was.height, was.width))
        .expect("was shape")
        .into_owned();
    Ok((map, was.gate_passed[0]))
}

/// WAS maps for the first `k` cross-attention channels.
pub fn stack_was(
    a_ca: &Array3<f64>,
    a_sa: &Array4<f64>,
    k: usize,
    gate: f64,
) -> Result<WasMapStack> {
    let mut g = Graph::new();
    let ca = single_cross(&mut g, a_ca);
    let sa = single_self(&mut g, a_sa)?;
    let was = stack_was_graph(&mut g, ca, sa, k, gate)?;
    Ok(graph_was_to_stack(&g, &was))
}

pub fn graph_was_to_stack(g: &Graph, was: &GraphWas) -> WasMapStack {
    let values = g.value(was.maps);
    let maps = values
        .axis_iter(Axis(1))
        .map(|col| {
            col.to_owned()
                .into_shape_with_order((was.height, was.width))
                .expect("was shape")
        })
        .collect();
    WasMapStack {
        maps,
        gate_passed: was.gate_passed.clone(),
    }
}

/// Min–max normalized 8-bit grayscale rendering of a map.
pub fn map_to_gray(map: &Array2<f64>) -> image::GrayImage {
    let (h, w) = map.dim();
    let lo = map.fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = map.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let span = if hi > lo { hi - lo } else { 1.0 };
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (map[[y as usize, x as usize]] - lo) / span;
        image::Luma([(v * 255.0).round() as u8])
    })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes per-layer and aggregated class maps as `{run}/{layer|agg}/{class}.png`.
pub fn write_debug_maps(
    run_dir: &Path,
    probes: &AttentionProbeSet,
    aggregated: &AggregatedAttention,
    class_names: &[String],
) -> Result<()> {
    let write = |dir: &Path, map: Array2<f64>, class: &str| -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}.png", sanitize(class)));
        map_to_gray(&map)
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::image(&path, e))
    };
    for (id, map) in &probes.cross {
        let dir = run_dir.join(format!("layer{id}"));
        for (k, name) in class_names.iter().enumerate().take(map.dim().2) {
            write(&dir, map.index_axis(Axis(2), k).to_owned(), name)?;
        }
    }
    let dir = run_dir.join("agg");
    for (k, name) in class_names.iter().enumerate().take(aggregated.a_ca.dim().2) {
        write(
            &dir,
            aggregated.a_ca.index_axis(Axis(2), k).to_owned(),
            name,
        )?;
    }
    Ok(())
}
