use std::fmt::Write;

use super::{NASGraph, NodeKind};

pub(super) fn to_dot(g: &NASGraph) -> String {
    let mut out = String::from("digraph nasgraph {\n    rankdir=TB;\n    node [style=filled, fontcolor=white];\n");
    for &id in g.topo_order() {
        let kind = g.kind(id).expect("ordered node exists");
        let (detail, color) = match kind {
            NodeKind::Conv {
                kernel,
                padded,
                out_ch,
                ..
            } => (
                format!("{kernel}x{kernel} {} {out_ch}ch", if *padded { "same" } else { "valid" }),
                "red",
            ),
            NodeKind::MaxPool { kernel, stride } => (format!("max {kernel}x{kernel}/{stride}"), "darkgreen"),
            NodeKind::Combine { .. } => (String::new(), "blue"),
            NodeKind::Linear { in_dim, out_dim, .. } => (format!("{in_dim}->{out_dim}"), "gray30"),
        };
        let name = g.name(id);
        let label = if detail.is_empty() {
            name.clone()
        } else {
            format!("{name}\\n{detail}")
        };
        let _ = writeln!(out, "    {name} [label=\"{label}\", fillcolor={color}];");
    }
    for (x, y) in g.edges() {
        let _ = writeln!(out, "    {} -> {};", g.name(x), g.name(y));
    }
    out.push_str("}\n");
    out
}
