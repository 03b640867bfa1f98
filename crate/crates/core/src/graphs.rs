//! Labeled graphs, TU-format ingestion, SGC propagation and the SortPool baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledGraph {
    pub num_nodes: usize,
    /// Undirected edges stored once as `(min, max)`, sorted, no self-loops.
    pub edges: Vec<(usize, usize)>,
    pub node_labels: Vec<usize>,
    pub class_label: usize,
}

impl LabeledGraph {
    /// Normalizes the edge list (orientation, duplicates, order) and validates it.
    pub fn new(
        num_nodes: usize,
        edges: &[(usize, usize)],
        node_labels: Vec<usize>,
        class_label: usize,
    ) -> Result<Self> {
        if node_labels.len() != num_nodes {
            return Err(Error::DimensionMismatch {
                context: "node labels",
                expected: num_nodes,
                found: node_labels.len(),
            });
        }
        let mut set = BTreeSet::new();
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidDataset(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(Error::InvalidDataset(format!("self-loop on node {u}")));
            }
            set.insert((u.min(v), u.max(v)));
        }
        Ok(Self {
            num_nodes,
            edges: set.into_iter().collect(),
            node_labels,
            class_label,
        })
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.num_nodes];
        if perm.len() != self.num_nodes
            || perm
                .iter()
                .any(|&p| p >= self.num_nodes || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidParameter(
                "not a permutation of the node set".into(),
            ));
        }
        let mut labels = vec![0; self.num_nodes];
        for (i, &p) in perm.iter().enumerate() {
            labels[p] = self.node_labels[i];
        }
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|&(u, v)| (perm[u], perm[v]))
            .collect();
        Self::new(self.num_nodes, &edges, labels, self.class_label)
    }

    /// Neighbour lists, each sorted.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphDataset {
    pub name: String,
    pub graphs: Vec<LabeledGraph>,
    pub num_node_label_kinds: usize,
    pub num_classes: usize,
}

impl GraphDataset {
    /// Derives label counts from the graphs and checks that labels are dense.
    pub fn new(name: impl Into<String>, graphs: Vec<LabeledGraph>) -> Result<Self> {
        let name = name.into();
        if graphs.is_empty() {
            return Err(Error::InvalidDataset(format!("{name}: no graphs")));
        }
        let kinds: BTreeSet<usize> = graphs
            .iter()
            .flat_map(|g| g.node_labels.iter().copied())
            .collect();
        let classes: BTreeSet<usize> = graphs.iter().map(|g| g.class_label).collect();
        let dense = |s: &BTreeSet<usize>| s.iter().enumerate().all(|(i, &v)| i == v);
        if !dense(&kinds) || !dense(&classes) {
            return Err(Error::InvalidDataset(format!(
                "{name}: labels are not a dense range from 0"
            )));
        }
        let ds = Self {
            num_node_label_kinds: kinds.len(),
            num_classes: classes.len(),
            graphs,
            name,
        };
        ds.check_known_counts()?;
        Ok(ds)
    }

    fn check_known_counts(&self) -> Result<()> {
        if self.name.eq_ignore_ascii_case("MUTAG")
            && (
                self.graphs.len(),
                self.num_node_label_kinds,
                self.num_classes,
            ) != (188, 7, 2)
        {
            return Err(Error::InvalidDataset(format!(
                "MUTAG must have 188 graphs, 7 node label kinds and 2 classes; found {}, {}, {}",
                self.graphs.len(),
                self.num_node_label_kinds,
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn class_labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.class_label).collect()
    }
}

fn tu_file(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

/// Dataset name: the directory name when `<name>_A.txt` exists, else the
/// unique prefix of a `*_A.txt` file.
fn dataset_name(dir: &Path) -> Result<String> {
    if let Some(name) = dir.file_name().and_then(|n| n.to_str()) {
        if tu_file(dir, name, "A").is_file() {
            return Ok(name.to_string());
        }
    }
    let entries = fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|f| f.strip_suffix("_A.txt"))
                .map(str::to_string)
        })
        .collect();
    names.sort();
    match names.len() {
        1 => Ok(names.remove(0)),
        0 => Err(Error::Io {
            path: dir.join("<name>_A.txt"),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no TU edge list in directory",
            ),
        }),
        _ => Err(Error::InvalidDataset(format!(
            "several TU datasets in {}: {names:?}",
            dir.display()
        ))),
    }
}

/// Lines with trailing blank lines removed; `(1-based line number, trimmed text)`.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines: Vec<(usize, String)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .collect();
    while lines.last().is_some_and(|(_, l)| l.is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

fn parse_int(path: &Path, line: usize, token: &str) -> Result<i64> {
    token.trim().parse::<i64>().map_err(|_| Error::Parse {
        file: path.display().to_string(),
        line,
        message: format!("expected an integer, found {token:?}"),
    })
}

fn parse_column(path: &Path) -> Result<Vec<(usize, i64)>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| parse_int(path, line, &text).map(|v| (line, v)))
        .collect()
}

fn parse_error(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line,
        message,
    }
}

/// Dense relabeling of the sorted distinct values.
fn dense_map(values: impl Iterator<Item = i64>) -> BTreeMap<i64, usize> {
    let distinct: BTreeSet<i64> = values.collect();
    distinct
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect()
}

/// Reads a TU-format dataset (`<name>_A.txt`, `<name>_graph_indicator.txt`,
/// `<name>_graph_labels.txt`, `<name>_node_labels.txt`, 1-based indices).
pub fn parse_tu_dataset(dir: &Path) -> Result<GraphDataset> {
    let name = dataset_name(dir)?;
    let labels_path = tu_file(dir, &name, "graph_labels");
    let indicator_path = tu_file(dir, &name, "graph_indicator");
    let node_labels_path = tu_file(dir, &name, "node_labels");
    let edges_path = tu_file(dir, &name, "A");

    let graph_labels = parse_column(&labels_path)?;
    let num_graphs = graph_labels.len();
    let indicator = parse_column(&indicator_path)?;
    let node_labels = parse_column(&node_labels_path)?;
    let num_nodes = indicator.len();

    if node_labels.len() != num_nodes {
        let line = num_nodes.min(node_labels.len()) + 1;
        return Err(parse_error(
            &node_labels_path,
            line,
            format!(
                "{} node labels for {num_nodes} nodes with a graph assignment",
                node_labels.len()
            ),
        ));
    }

    // node id (0-based global) -> (graph, local index)
    let mut owner = Vec::with_capacity(num_nodes);
    let mut sizes = vec![0usize; num_graphs];
    for &(line, gid) in &indicator {
        if gid < 1 || gid as usize > num_graphs {
            return Err(parse_error(
                &indicator_path,
                line,
                format!("graph {gid} out of range 1..={num_graphs}"),
            ));
        }
        let g = gid as usize - 1;
        owner.push((g, sizes[g]));
        sizes[g] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidDataset(format!(
            "{name}: graph {} has no nodes",
            empty + 1
        )));
    }

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (line, text) in read_lines(&edges_path)? {
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != 2 {
            return Err(parse_error(
                &edges_path,
                line,
                format!("expected \"i, j\", found {text:?}"),
            ));
        }
        let mut ends = [0usize; 2];
        for (slot, token) in ends.iter_mut().zip(&parts) {
            let id = parse_int(&edges_path, line, token)?;
            if id < 1 || id as usize > num_nodes {
                return Err(parse_error(
                    &edges_path,
                    line,
                    format!("node {id} out of range 1..={num_nodes}"),
                ));
            }
            *slot = id as usize - 1;
        }
        let (gu, lu) = owner[ends[0]];
        let (gv, lv) = owner[ends[1]];
        if gu != gv {
            return Err(parse_error(
                &edges_path,
                line,
                "edge joins nodes of different graphs".into(),
            ));
        }
        if lu == lv {
            log::warn!("{}:{line}: dropping self-loop", edges_path.display());
            continue;
        }
        edges[gu].push((lu, lv));
    }

    let class_map = dense_map(graph_labels.iter().map(|&(_, v)| v));
    let kind_map = dense_map(node_labels.iter().map(|&(_, v)| v));
    let mut labels: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    for (node, &(_, raw)) in node_labels.iter().enumerate() {
        labels[owner[node].0].push(kind_map[&raw]);
    }

    let graphs = labels
        .into_iter()
        .zip(edges)
        .zip(&graph_labels)
        .enumerate()
        .map(|(g, ((lab, e), &(_, class)))| {
            LabeledGraph::new(sizes[g], &e, lab, class_map[&class]).map_err(|source| Error::Graph {
                graph: g,
                source: Box::new(source),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GraphDataset::new(name, graphs)
}

/// Writes `ds` in TU format under `dir` with file prefix `ds.name`. Edges are
/// written in both directions; labels are the dense values.
pub fn write_tu_dataset(ds: &GraphDataset, dir: &Path) -> Result<()> {
    let write = |suffix: &str, body: String| -> Result<()> {
        let path = tu_file(dir, &ds.name, suffix);
        fs::write(&path, body).map_err(|source| Error::Io { path, source })
    };
    let mut a = String::new();
    let mut indicator = String::new();
    let mut node_labels = String::new();
    let mut graph_labels = String::new();
    let mut offset = 0;
    for (g, graph) in ds.graphs.iter().enumerate() {
        for &label in &graph.node_labels {
            indicator.push_str(&format!("{}\n", g + 1));
            node_labels.push_str(&format!("{label}\n"));
        }
        for &(u, v) in &graph.edges {
            a.push_str(&format!("{}, {}\n", u + offset + 1, v + offset + 1));
            a.push_str(&format!("{}, {}\n", v + offset + 1, u + offset + 1));
        }
        graph_labels.push_str(&format!("{}\n", graph.class_label));
        offset += graph.num_nodes;
    }
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write("A", a)?;
    write("graph_indicator", indicator)?;
    write("node_labels", node_labels)?;
    write("graph_labels", graph_labels)
}

/// One row per node with a single 1 at the node's label.
pub fn one_hot_features(g: &LabeledGraph, kinds: usize) -> Result<Array2<f64>> {
    let mut f = Array2::zeros((g.num_nodes, kinds));
    for (i, &label) in g.node_labels.iter().enumerate() {
        if label >= kinds {
            return Err(Error::InvalidParameter(format!(
                "node label {label} outside 0..{kinds}"
            )));
        }
        f[[i, label]] = 1.0;
    }
    Ok(f)
}

/// `Ŝᴷ F` with `Ŝ = D̃^{-1/2}(A + I)D̃^{-1/2}` and `D̃` the degrees of `A + I`.
pub fn sgc_propagate(
    g: &LabeledGraph,
    features: ArrayView2<'_, f64>,
    k: usize,
) -> Result<Array2<f64>> {
    if features.nrows() != g.num_nodes {
        return Err(Error::DimensionMismatch {
            context: "sgc feature rows",
            expected: g.num_nodes,
            found: features.nrows(),
        });
    }
    let adj = g.adjacency();
    let inv_sqrt: Vec<f64> = adj
        .iter()
        .map(|n| 1.0 / ((n.len() + 1) as f64).sqrt())
        .collect();
    let mut cur = features.to_owned();
    for _ in 0..k {
        let mut next = Array2::zeros(cur.dim());
        for (i, neighbours) in adj.iter().enumerate() {
            let mut row = next.row_mut(i);
            row.scaled_add(inv_sqrt[i] * inv_sqrt[i], &cur.row(i));
            for &j in neighbours {
                row.scaled_add(inv_sqrt[i] * inv_sqrt[j], &cur.row(j));
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Rows kept by [`sortpool_baseline`]: the `k` largest by the last channel,
/// descending, ties by index. Shorter than `k` when there are fewer rows.
pub fn sortpool_indices(y: ArrayView2<'_, f64>, k: usize) -> Result<Vec<usize>> {
    let d = y.ncols();
    if d == 0 {
        return Err(Error::InvalidParameter(
            "sortpool needs at least one channel".into(),
        ));
    }
    let mut order: Vec<usize> = (0..y.nrows()).collect();
    order.sort_by(|&a, &b| y[[b, d - 1]].total_cmp(&y[[a, d - 1]]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// The `k` top rows of `y` by its last channel, zero-padded to `k` rows.
pub fn sortpool_baseline(y: ArrayView2<'_, f64>, k: usize) -> Result<Array2<f64>> {
    let idx = sortpool_indices(y, k)?;
    let mut out = Array2::zeros((k, y.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&y.row(i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_fixture(dir: &Path, name: &str, a: &str, ind: &str, gl: &str, nl: &str) {
        fs::write(tu_file(dir, name, "A"), a).unwrap();
        fs::write(tu_file(dir, name, "graph_indicator"), ind).unwrap();
        fs::write(tu_file(dir, name, "graph_labels"), gl).unwrap();
        fs::write(tu_file(dir, name, "node_labels"), nl).unwrap();
    }

    #[test]
    fn two_node_fixture() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(
            tmp.path(),
            "TINY",
            "1, 2\n2, 1\n",
            "1\n1\n",
            "1\n",
            "0\n1\n",
        );
        let ds = parse_tu_dataset(tmp.path()).unwrap();
        assert_eq!(ds.name, "TINY");
        assert_eq!(ds.graphs.len(), 1);
        let g = &ds.graphs[0];
        assert_eq!(g.edges, vec![(0, 1)]);
        assert_eq!(g.node_labels, vec![0, 1]);
        assert_eq!(g.class_label, 0);
        assert_eq!((ds.num_node_label_kinds, ds.num_classes), (2, 1));
    }

    #[test]
    fn parse_errors_carry_locations() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), "BAD", "1,2\n", "1\n3\n", "1\n-1\n", "0\n0\n");
        match parse_tu_dataset(tmp.path()) {
            Err(Error::Parse { line, file, .. }) => {
                assert_eq!(line, 2);
                assert!(file.ends_with("BAD_graph_indicator.txt"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        write_fixture(tmp.path(), "BAD", "1,x\n", "1\n1\n", "1\n", "0\n0\n");
        assert!(matches!(
            parse_tu_dataset(tmp.path()),
            Err(Error::Parse { line: 1, .. })
        ));

        write_fixture(tmp.path(), "BAD", "1,3\n", "1\n1\n", "1\n", "0\n0\n");
        assert!(matches!(
            parse_tu_dataset(tmp.path()),
            Err(Error::Parse { line: 1, .. })
        ));

        write_fixture(tmp.path(), "BAD", "1,2\n", "1\n1\n", "1\n", "0\n0\n4\n");
        assert!(matches!(
            parse_tu_dataset(tmp.path()),
            Err(Error::Parse { line: 3, .. })
        ));

        fs::remove_file(tu_file(tmp.path(), "BAD", "node_labels")).unwrap();
        assert!(matches!(
            parse_tu_dataset(tmp.path()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn labels_are_remapped_and_edges_deduplicated() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(
            tmp.path(),
            "REMAP",
            "1, 2\n2, 1\n1,2\n3, 4\n4, 5\n5, 4\n",
            "1\n1\n2\n2\n2\n",
            "-1\n1\n",
            "3\n7\n7\n3\n9\n",
        );
        let ds = parse_tu_dataset(tmp.path()).unwrap();
        assert_eq!(ds.graphs[0].edges, vec![(0, 1)]);
        assert_eq!(ds.graphs[1].edges, vec![(0, 1), (1, 2)]);
        assert_eq!(ds.graphs[0].node_labels, vec![0, 1]);
        assert_eq!(ds.graphs[1].node_labels, vec![1, 0, 2]);
        assert_eq!(ds.class_labels(), vec![0, 1]);

        let out = tempfile::tempdir().unwrap();
        write_tu_dataset(&ds, out.path()).unwrap();
        let mut again = parse_tu_dataset(out.path()).unwrap();
        again.name = ds.name.clone();
        assert_eq!(again, ds);
    }

    #[test]
    fn mutag_name_enforces_counts() {
        let g = LabeledGraph::new(1, &[], vec![0], 0).unwrap();
        assert!(matches!(
            GraphDataset::new("MUTAG", vec![g]),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn one_hot_rows() {
        let g = LabeledGraph::new(2, &[], vec![2, 2], 0).unwrap();
        let f = one_hot_features(&g, 7).unwrap();
        assert_eq!(f.row(0), f.row(1));
        assert_eq!(f.row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let g0 = LabeledGraph::new(1, &[], vec![0], 0).unwrap();
        assert_eq!(
            one_hot_features(&g0, 7).unwrap().row(0).to_vec(),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert!(one_hot_features(&g, 2).is_err());
    }

    #[test]
    fn sgc_small_cases() {
        let single = LabeledGraph::new(1, &[], vec![0], 0).unwrap();
        let f = array![[3.0, -1.0]];
        assert_eq!(sgc_propagate(&single, f.view(), 2).unwrap(), f);

        let pair = LabeledGraph::new(2, &[(0, 1)], vec![0, 0], 0).unwrap();
        let f = array![[1.0, 0.0], [3.0, 2.0]];
        let out = sgc_propagate(&pair, f.view(), 2).unwrap();
        for r in 0..2 {
            assert!((out[[r, 0]] - 2.0).abs() < 1e-15 && (out[[r, 1]] - 1.0).abs() < 1e-15);
        }
        assert_eq!(sgc_propagate(&pair, f.view(), 0).unwrap(), f);
        assert!(sgc_propagate(&pair, array![[1.0]].view(), 1).is_err());
    }

    #[test]
    fn sortpool_cases() {
        let y = array![[0.0, 3.0], [1.0, 2.0], [2.0, 1.0]];
        assert_eq!(sortpool_baseline(y.view(), 3).unwrap(), y);
        let y2 = array![[1.0, 1.0], [2.0, 5.0]];
        let out = sortpool_baseline(y2.view(), 3).unwrap();
        assert_eq!(out, array![[2.0, 5.0], [1.0, 1.0], [0.0, 0.0]]);
        let ties = array![[0.0, 1.0], [9.0, 1.0], [5.0, 2.0]];
        assert_eq!(sortpool_indices(ties.view(), 3).unwrap(), vec![2, 0, 1]);
    }
}
