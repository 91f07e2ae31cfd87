//! Text formats.
//!
//! Node datasets live in a directory of four files. In every file blank
//! lines and lines starting with `#` are ignored, except the optional
//! `# classes: C` header in `labels.csv`.
//!
//! - `edges.tsv`: one edge per line, two non-negative integers separated by
//!   a tab (any whitespace is accepted). Direction and duplicates are
//!   irrelevant; each edge is stored once with the smaller index first.
//! - `features.csv`: one row per node, comma-separated reals. The row count
//!   defines `node_count`.
//! - `labels.csv`: one non-negative integer per node. Without a header the
//!   class count is `max + 1`.
//! - `splits.csv`: one token per node: `train`, `val`, `test`, or `-` for
//!   unassigned. Several tokens joined by `|` are rejected as overlapping.
//!
//! Graph datasets use JSON lines, one record per graph:
//!
//! ```text
//! # classes: 2
//! {"nodes": 3, "edges": [[0, 1], [1, 2], [0, 2]], "features": [[1.0], [1.0], [1.0]], "label": 0, "split": "train"}
//! ```
//!
//! `split` may be omitted or `null`. `features` must have `nodes` rows of
//! equal width.
//!
//! [`load_tu_dataset`] reads the TU benchmark layout (`{P}_A.txt`,
//! `{P}_graph_indicator.txt`, `{P}_graph_labels.txt` and the optional
//! `{P}_node_labels.txt`).

use super::{DataError, Graph, GraphDataset, GraphSet, NodeDataset, Result, Split};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.csv";

const CLASSES_HEADER: &str = "# classes:";

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-comment, non-blank lines with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn classes_header(text: &str, file: &str) -> Result<Option<usize>> {
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.trim().strip_prefix(CLASSES_HEADER) {
            return rest.trim().parse().map(Some).map_err(|_| DataError::Parse {
                file: file.into(),
                line: i + 1,
                msg: format!("bad class count `{}`", rest.trim()),
            });
        }
    }
    Ok(None)
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        file: file.into(),
        line,
        msg: msg.into(),
    }
}

fn parse_features(text: &str) -> Result<Array2<f64>> {
    let mut width = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, l) in content_lines(text) {
        let mut n = 0;
        for tok in l.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(FEATURES_FILE, line, format!("bad real `{}`", tok.trim())))?;
            if !v.is_finite() {
                return Err(parse_err(FEATURES_FILE, line, "non-finite feature"));
            }
            data.push(v);
            n += 1;
        }
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(DataError::Ragged {
                    file: FEATURES_FILE.into(),
                    line,
                    expected: w,
                    got: n,
                })
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or(DataError::Empty)?;
    Ok(Array2::from_shape_vec((rows, width), data).expect("consistent shape"))
}

fn parse_labels(text: &str, nodes: usize) -> Result<(Vec<usize>, usize)> {
    let declared = classes_header(text, LABELS_FILE)?;
    let mut labels = Vec::new();
    for (line, l) in content_lines(text) {
        let v: i64 = l
            .parse()
            .map_err(|_| parse_err(LABELS_FILE, line, format!("bad label `{l}`")))?;
        let limit = declared.unwrap_or(usize::MAX);
        if v < 0 || v as u64 >= limit as u64 {
            return Err(DataError::LabelOutOfRange {
                file: LABELS_FILE.into(),
                line,
                label: v,
                classes: declared.unwrap_or(0),
            });
        }
        labels.push(v as usize);
    }
    if labels.len() != nodes {
        return Err(DataError::CountMismatch {
            file: LABELS_FILE.into(),
            expected: nodes,
            got: labels.len(),
        });
    }
    let classes = declared.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Ok((labels, classes))
}

fn parse_splits(text: &str, nodes: usize) -> Result<Vec<Option<Split>>> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let tokens: Vec<&str> = l.split('|').map(str::trim).collect();
        if tokens.len() > 1 {
            return Err(DataError::Overlap {
                file: SPLITS_FILE.into(),
                line,
            });
        }
        if tokens[0] == "-" {
            out.push(None);
        } else {
            let s = tokens[0].parse().map_err(|e: String| parse_err(SPLITS_FILE, line, e))?;
            out.push(Some(s));
        }
    }
    if out.len() != nodes {
        return Err(DataError::CountMismatch {
            file: SPLITS_FILE.into(),
            expected: nodes,
            got: out.len(),
        });
    }
    Ok(out)
}

fn parse_edges(text: &str, nodes: usize) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (line, l) in content_lines(text) {
        let cols: Vec<&str> = l.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(parse_err(EDGES_FILE, line, format!("expected 2 columns, found {}", cols.len())));
        }
        let mut ends = [0usize; 2];
        for (slot, tok) in ends.iter_mut().zip(&cols) {
            let v: usize = tok
                .parse()
                .map_err(|_| parse_err(EDGES_FILE, line, format!("bad node index `{tok}`")))?;
            if v >= nodes {
                return Err(DataError::EdgeOutOfRange {
                    file: EDGES_FILE.into(),
                    line,
                    node: v,
                    nodes,
                });
            }
            *slot = v;
        }
        edges.push((ends[0], ends[1]));
    }
    Ok(edges)
}

/// Loads a node-classification dataset directory.
pub fn load_node_dataset(dir: &Path) -> Result<NodeDataset> {
    let paths = [EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLITS_FILE].map(|f| dir.join(f));
    if let Some(missing) = paths.iter().find(|p| !p.exists()) {
        return Err(DataError::MissingFile(missing.clone()));
    }
    let features = parse_features(&read(&paths[1])?)?;
    let n = features.nrows();
    let edges = parse_edges(&read(&paths[0])?, n)?;
    let (labels, num_classes) = parse_labels(&read(&paths[2])?, n)?;
    let splits = parse_splits(&read(&paths[3])?, n)?;
    Ok(NodeDataset {
        graph: Graph::new(n, edges, features),
        labels,
        splits,
        num_classes,
    })
}

fn fmt_row(out: &mut String, row: ndarray::ArrayView1<f64>) {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        write!(out, "{v}").expect("string write");
    }
    out.push('\n');
}

/// Writes the four-file layout; [`load_node_dataset`] reads it back exactly.
pub fn save_node_dataset(d: &NodeDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut edges = String::new();
    for (a, b) in &d.graph.edges {
        writeln!(edges, "{a}\t{b}").expect("string write");
    }
    let mut feats = String::new();
    for r in d.graph.features.rows() {
        fmt_row(&mut feats, r);
    }
    let mut labels = format!("{CLASSES_HEADER} {}\n", d.num_classes);
    for l in &d.labels {
        writeln!(labels, "{l}").expect("string write");
    }
    let mut splits = String::new();
    for s in &d.splits {
        splits.push_str(s.map_or("-", Split::as_str));
        splits.push('\n');
    }
    write(&dir.join(EDGES_FILE), &edges)?;
    write(&dir.join(FEATURES_FILE), &feats)?;
    write(&dir.join(LABELS_FILE), &labels)?;
    write(&dir.join(SPLITS_FILE), &splits)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
    label: i64,
    #[serde(default)]
    split: Option<Split>,
}

const JSONL: &str = "graphs.jsonl";

fn record_to_graph(r: GraphRecord, line: usize, file: &str) -> Result<(Graph, i64, Option<Split>)> {
    if r.features.len() != r.nodes {
        return Err(DataError::CountMismatch {
            file: format!("{file}:{line} features"),
            expected: r.nodes,
            got: r.features.len(),
        });
    }
    if r.nodes == 0 {
        return Err(parse_err(file, line, "graph with no nodes"));
    }
    let width = r.features[0].len();
    let mut data = Vec::with_capacity(r.nodes * width);
    for row in &r.features {
        if row.len() != width {
            return Err(DataError::Ragged {
                file: file.into(),
                line,
                expected: width,
                got: row.len(),
            });
        }
        data.extend_from_slice(row);
    }
    for &(a, b) in &r.edges {
        if a.max(b) >= r.nodes {
            return Err(DataError::EdgeOutOfRange {
                file: file.into(),
                line,
                node: a.max(b),
                nodes: r.nodes,
            });
        }
    }
    let f = Array2::from_shape_vec((r.nodes, width), data).expect("consistent shape");
    Ok((Graph::new(r.nodes, r.edges, f), r.label, r.split))
}

/// Parses JSON-lines graph records from a string.
pub fn parse_graph_records(text: &str, file: &str) -> Result<GraphSet> {
    let declared = classes_header(text, file)?;
    let mut graphs = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut width = None;
    for (line, l) in content_lines(text) {
        let rec: GraphRecord =
            serde_json::from_str(l).map_err(|e| parse_err(file, line, format!("malformed record: {e}")))?;
        let (g, label, split) = record_to_graph(rec, line, file)?;
        match width {
            None => width = Some(g.feature_dim()),
            Some(w) if w != g.feature_dim() => {
                return Err(DataError::Ragged {
                    file: file.into(),
                    line,
                    expected: w,
                    got: g.feature_dim(),
                })
            }
            _ => {}
        }
        let limit = declared.unwrap_or(usize::MAX);
        if label < 0 || label as u64 >= limit as u64 {
            return Err(DataError::LabelOutOfRange {
                file: file.into(),
                line,
                label,
                classes: declared.unwrap_or(0),
            });
        }
        graphs.push(g);
        labels.push(label as usize);
        splits.push(split);
    }
    if graphs.is_empty() {
        return Err(DataError::Empty);
    }
    let num_classes = declared.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Ok(GraphSet {
        graphs,
        labels,
        splits,
        num_classes,
    })
}

/// Loads a JSON-lines graph dataset from `path`, or from `path/graphs.jsonl`
/// when `path` is a directory.
pub fn load_graph_dataset(path: &Path) -> Result<GraphSet> {
    let file: PathBuf = if path.is_dir() { path.join(JSONL) } else { path.to_path_buf() };
    let name = file
        .file_name()
        .map_or_else(|| JSONL.to_string(), |n| n.to_string_lossy().into_owned());
    parse_graph_records(&read(&file)?, &name)
}

/// Writes JSON lines; [`load_graph_dataset`] reads them back exactly.
pub fn save_graph_dataset(d: &GraphSet, path: &Path) -> Result<()> {
    let mut out = format!("{CLASSES_HEADER} {}\n", d.num_classes);
    for ((g, &label), &split) in d.graphs.iter().zip(&d.labels).zip(&d.splits) {
        let rec = GraphRecord {
            nodes: g.node_count,
            edges: g.edges.clone(),
            features: g.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            label: label as i64,
            split,
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable record"));
        out.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| DataError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    write(path, &out)
}

fn tu_ints(text: &str, file: &str, sep: char) -> Result<Vec<Vec<i64>>> {
    content_lines(text)
        .map(|(line, l)| {
            l.split(sep)
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| parse_err(file, line, format!("bad integer `{}`", t.trim())))
                })
                .collect()
        })
        .collect()
}

/// Locates the `{P}_A.txt` prefix inside `dir`.
fn tu_prefix(dir: &Path) -> Result<String> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut found: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_A.txt")).map(String::from))
        .collect();
    found.sort();
    found
        .into_iter()
        .next()
        .ok_or_else(|| DataError::MissingFile(dir.join("*_A.txt")))
}

/// Reads the TU multi-file layout. Graph labels are remapped to `0..C` in
/// sorted order. Node labels, when present, become one-hot features;
/// otherwise every node gets the single feature `1`.
pub fn load_tu_dataset(dir: &Path) -> Result<GraphSet> {
    let p = tu_prefix(dir)?;
    let f_a = format!("{p}_A.txt");
    let f_ind = format!("{p}_graph_indicator.txt");
    let f_lab = format!("{p}_graph_labels.txt");
    let f_node = format!("{p}_node_labels.txt");
    let indicator: Vec<i64> = tu_ints(&read(&dir.join(&f_ind))?, &f_ind, ',')?
        .into_iter()
        .map(|r| r[0])
        .collect();
    let graph_labels: Vec<i64> = tu_ints(&read(&dir.join(&f_lab))?, &f_lab, ',')?
        .into_iter()
        .map(|r| r[0])
        .collect();
    let edges = tu_ints(&read(&dir.join(&f_a))?, &f_a, ',')?;
    let node_path = dir.join(&f_node);
    let node_labels: Option<Vec<i64>> = if node_path.exists() {
        Some(tu_ints(&read(&node_path)?, &f_node, ',')?.into_iter().map(|r| r[0]).collect())
    } else {
        None
    };

    let n_graphs = graph_labels.len();
    let n_nodes = indicator.len();
    // Global (0-based) node -> (graph, local index).
    let mut local = vec![(0usize, 0usize); n_nodes];
    let mut sizes = vec![0usize; n_graphs];
    for (v, &g) in indicator.iter().enumerate() {
        if g < 1 || g as usize > n_graphs {
            return Err(parse_err(&f_ind, v + 1, format!("graph id {g} outside 1..={n_graphs}")));
        }
        let g = g as usize - 1;
        local[v] = (g, sizes[g]);
        sizes[g] += 1;
    }
    let mut graph_edges = vec![Vec::new(); n_graphs];
    for (i, e) in edges.iter().enumerate() {
        if e.len() != 2 {
            return Err(parse_err(&f_a, i + 1, "expected 2 columns"));
        }
        let (a, b) = (e[0], e[1]);
        for x in [a, b] {
            if x < 1 || x as usize > n_nodes {
                return Err(DataError::EdgeOutOfRange {
                    file: f_a.clone(),
                    line: i + 1,
                    node: x.max(0) as usize,
                    nodes: n_nodes,
                });
            }
        }
        let (ga, la) = local[a as usize - 1];
        let (gb, lb) = local[b as usize - 1];
        if ga != gb {
            return Err(parse_err(&f_a, i + 1, "edge joins two graphs"));
        }
        graph_edges[ga].push((la, lb));
    }

    let (feat_dim, node_code): (usize, BTreeMap<i64, usize>) = match &node_labels {
        Some(nl) => {
            if nl.len() != n_nodes {
                return Err(DataError::CountMismatch {
                    file: f_node,
                    expected: n_nodes,
                    got: nl.len(),
                });
            }
            let mut distinct: Vec<i64> = nl.clone();
            distinct.sort_unstable();
            distinct.dedup();
            (distinct.len(), distinct.into_iter().enumerate().map(|(i, v)| (v, i)).collect())
        }
        None => (1, BTreeMap::new()),
    };
    let mut feats: Vec<Array2<f64>> = sizes.iter().map(|&s| Array2::zeros((s, feat_dim))).collect();
    for (v, &(g, l)) in local.iter().enumerate() {
        let col = node_labels.as_ref().map_or(0, |nl| node_code[&nl[v]]);
        feats[g][[l, col]] = 1.0;
    }

    let mut distinct = graph_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let code: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let graphs = graph_edges
        .into_iter()
        .zip(feats)
        .zip(&sizes)
        .map(|((e, f), &s)| Graph::new(s, e, f))
        .collect();
    Ok(GraphSet {
        graphs,
        labels: graph_labels.iter().map(|l| code[l]).collect(),
        splits: vec![None; n_graphs],
        num_classes: distinct.len(),
    })
}

/// Loads whichever format `path` holds: a node-dataset directory, a TU
/// directory, or a JSON-lines file.
pub fn load_any(path: &Path) -> Result<GraphDataset> {
    if path.is_dir() {
        if path.join(EDGES_FILE).exists() {
            return load_node_dataset(path).map(GraphDataset::Node);
        }
        if path.join(JSONL).exists() {
            return load_graph_dataset(path).map(GraphDataset::Graph);
        }
        return load_tu_dataset(path).map(GraphDataset::Graph);
    }
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    load_graph_dataset(path).map(GraphDataset::Graph)
}

/// Saves `d` as a node directory or as `dir/graphs.jsonl`.
pub fn save_any(d: &GraphDataset, dir: &Path) -> Result<()> {
    match d {
        GraphDataset::Node(n) => save_node_dataset(n, dir),
        GraphDataset::Graph(g) => save_graph_dataset(g, &dir.join(JSONL)),
    }
}
