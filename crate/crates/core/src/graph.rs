//! Scene graphs: raw JSON ingestion, the relation-to-vertex rewrite, the
//! global vertex, and attention neighborhoods.
//!
//! A raw graph has labelled objects (each with attribute labels) and labelled
//! relation edges between objects. [`rewrite_relations`] turns it into an
//! unlabelled DAG: every relation `(s, p, o)` becomes a vertex `p` with edges
//! `s → p → o`, and every attribute `a` of object `o` becomes a vertex with
//! edge `o → a`. [`add_global_vertex`] then appends one vertex wired both ways
//! to everything else.
//!
//! Vertex order is canonical: objects in input order, then relation vertices
//! in input order, then attribute vertices grouped by owning object, and the
//! global vertex last. Encoders use this index as the positional rank.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

pub const GLOBAL_LABEL: &str = "<global>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawObject {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRelation {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSceneGraph {
    pub objects: Vec<RawObject>,
    #[serde(default)]
    pub relations: Vec<RawRelation>,
}

impl RawSceneGraph {
    /// Checks non-emptiness, id uniqueness, relation endpoints, and that the
    /// object-level relation graph is acyclic.
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::ingestion("objects", "scene graph has no objects"));
        }
        let index = self.object_index_checked()?;
        for (r, rel) in self.relations.iter().enumerate() {
            for (field, id) in [("subject", &rel.subject), ("object", &rel.object)] {
                if !index.contains_key(id.as_str()) {
                    return Err(Error::ingestion(
                        format!("relations[{r}].{field}"),
                        format!("unknown object id \"{id}\""),
                    ));
                }
            }
        }
        if let Some(cycle) = self.object_cycle(&index) {
            let ids: Vec<&str> = cycle.iter().map(|&i| self.objects[i].id.as_str()).collect();
            return Err(Error::ingestion(
                "relations",
                format!("object-level relation cycle through {}", ids.join(" -> ")),
            ));
        }
        Ok(())
    }

    fn object_index_checked(&self) -> Result<HashMap<&str, usize>> {
        let mut index = HashMap::new();
        for (i, obj) in self.objects.iter().enumerate() {
            if index.insert(obj.id.as_str(), i).is_some() {
                return Err(Error::ingestion(
                    format!("objects[{i}].id"),
                    format!("duplicate id \"{}\"", obj.id),
                ));
            }
        }
        Ok(index)
    }

    fn object_cycle(&self, index: &HashMap<&str, usize>) -> Option<Vec<usize>> {
        let n = self.objects.len();
        let mut out_edges = vec![Vec::new(); n];
        for rel in &self.relations {
            out_edges[index[rel.subject.as_str()]].push(index[rel.object.as_str()]);
        }
        // 0 = unvisited, 1 = on stack, 2 = done.
        let mut state = vec![0u8; n];
        let mut stack: Vec<usize> = Vec::new();
        fn visit(
            v: usize,
            out_edges: &[Vec<usize>],
            state: &mut [u8],
            stack: &mut Vec<usize>,
        ) -> Option<Vec<usize>> {
            state[v] = 1;
            stack.push(v);
            for &w in &out_edges[v] {
                if state[w] == 1 {
                    let start = stack.iter().position(|&x| x == w).unwrap_or(0);
                    return Some(stack[start..].to_vec());
                }
                if state[w] == 0 {
                    if let Some(c) = visit(w, out_edges, state, stack) {
                        return Some(c);
                    }
                }
            }
            stack.pop();
            state[v] = 2;
            None
        }
        (0..n).find_map(|v| {
            if state[v] == 0 {
                visit(v, &out_edges, &mut state, &mut stack)
            } else {
                None
            }
        })
    }

    /// Compact JSON with a fixed field order.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scene graph serialization cannot fail")
    }
}

/// Parses and validates one scene-graph JSON document.
pub fn parse_scene_graph(text: &[u8]) -> Result<RawSceneGraph> {
    let raw: RawSceneGraph = serde_json::from_slice(text).map_err(|e| {
        Error::ingestion(
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    raw.validate()?;
    Ok(raw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VertexKind {
    Object,
    Relation,
    Attribute,
    Global,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vertex {
    pub kind: VertexKind,
    pub label: String,
}

/// Which one-hop vertices a vertex attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodRule {
    /// Vertex attends to itself.
    pub include_self: bool,
    /// In-edges count as well as out-edges.
    pub symmetric: bool,
}

impl Default for NeighborhoodRule {
    fn default() -> Self {
        NeighborhoodRule {
            include_self: true,
            symmetric: true,
        }
    }
}

/// Unlabelled directed graph over typed vertices; `adjacency.get(i, j)` is
/// the edge `i → j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    vertices: Vec<Vertex>,
    adjacency: Mask,
}

impl SceneGraph {
    /// Builds a graph from vertices and directed edges.
    pub fn from_edges(vertices: Vec<Vertex>, edges: &[(usize, usize)]) -> Result<Self> {
        let m = vertices.len();
        let mut adjacency = Mask::new(m, m);
        for &(s, t) in edges {
            if s >= m || t >= m {
                return Err(Error::contract(format!(
                    "edge ({s}, {t}) out of range for {m} vertices"
                )));
            }
            adjacency.set(s, t, true);
        }
        Ok(SceneGraph {
            vertices,
            adjacency,
        })
    }

    /// Rewrite plus global vertex: the encoder's input graph.
    pub fn from_raw(raw: &RawSceneGraph) -> Result<Self> {
        add_global_vertex(&rewrite_relations(raw)?)
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn adjacency(&self) -> &Mask {
        &self.adjacency
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency.get(from, to)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.count()
    }

    pub fn global_index(&self) -> Option<usize> {
        self.vertices
            .iter()
            .position(|v| v.kind == VertexKind::Global)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.vertices.iter().map(|v| v.label.as_str())
    }

    /// `M[i][j]` is true iff `j ∈ N_i`.
    pub fn neighborhood_mask(&self, rule: NeighborhoodRule) -> Mask {
        let a = &self.adjacency;
        Mask::from_fn(self.len(), self.len(), |i, j| {
            (rule.include_self && i == j) || a.get(i, j) || (rule.symmetric && a.get(j, i))
        })
    }
}

/// Relation edges become vertices and attributes become leaf vertices.
pub fn rewrite_relations(raw: &RawSceneGraph) -> Result<SceneGraph> {
    let index = raw.object_index_checked()?;
    let mut vertices: Vec<Vertex> = raw
        .objects
        .iter()
        .map(|o| Vertex {
            kind: VertexKind::Object,
            label: o.label.clone(),
        })
        .collect();
    let mut edges = Vec::new();
    for (r, rel) in raw.relations.iter().enumerate() {
        let lookup = |field: &str, id: &str| {
            index.get(id).copied().ok_or_else(|| {
                Error::ingestion(
                    format!("relations[{r}].{field}"),
                    format!("unknown object id \"{id}\""),
                )
            })
        };
        let s = lookup("subject", &rel.subject)?;
        let o = lookup("object", &rel.object)?;
        let p = vertices.len();
        vertices.push(Vertex {
            kind: VertexKind::Relation,
            label: rel.predicate.clone(),
        });
        edges.push((s, p));
        edges.push((p, o));
    }
    for (i, obj) in raw.objects.iter().enumerate() {
        for attr in &obj.attributes {
            let a = vertices.len();
            vertices.push(Vertex {
                kind: VertexKind::Attribute,
                label: attr.clone(),
            });
            edges.push((i, a));
        }
    }
    SceneGraph::from_edges(vertices, &edges)
}

/// Appends the global vertex with edges to and from every other vertex.
pub fn add_global_vertex(g: &SceneGraph) -> Result<SceneGraph> {
    if g.global_index().is_some() {
        return Err(Error::contract("graph already has a global vertex"));
    }
    if g.is_empty() {
        return Err(Error::contract(
            "cannot add a global vertex to an empty graph",
        ));
    }
    let m = g.len();
    let mut adjacency = Mask::new(m + 1, m + 1);
    for i in 0..m {
        for j in 0..m {
            adjacency.set(i, j, g.adjacency.get(i, j));
        }
        adjacency.set(i, m, true);
        adjacency.set(m, i, true);
    }
    let mut vertices = g.vertices.clone();
    vertices.push(Vertex {
        kind: VertexKind::Global,
        label: GLOBAL_LABEL.to_string(),
    });
    Ok(SceneGraph {
        vertices,
        adjacency,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DagReport {
    /// A topological order of the non-global vertices (smallest index first
    /// among ready vertices).
    Acyclic(Vec<usize>),
    /// One witness cycle, starting at its smallest vertex index.
    Cycle(Vec<usize>),
}

/// Topological sort over the non-global vertices.
pub fn validate_dag(g: &SceneGraph) -> DagReport {
    let keep: Vec<bool> = g
        .vertices
        .iter()
        .map(|v| v.kind != VertexKind::Global)
        .collect();
    let m = g.len();
    let edge = |i: usize, j: usize| keep[i] && keep[j] && g.adjacency.get(i, j);
    let mut indegree: Vec<usize> = (0..m)
        .map(|j| (0..m).filter(|&i| edge(i, j)).count())
        .collect();
    let mut ready: BinaryHeap<Reverse<usize>> = (0..m)
        .filter(|&v| keep[v] && indegree[v] == 0)
        .map(Reverse)
        .collect();
    let mut order = Vec::new();
    let mut done = vec![false; m];
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        done[v] = true;
        for (w, deg) in indegree.iter_mut().enumerate() {
            if edge(v, w) {
                *deg -= 1;
                if *deg == 0 {
                    ready.push(Reverse(w));
                }
            }
        }
    }
    let remaining: Vec<usize> = (0..m).filter(|&v| keep[v] && !done[v]).collect();
    let Some(&start) = remaining.first() else {
        return DagReport::Acyclic(order);
    };
    // Every leftover vertex has a leftover predecessor; walk predecessors
    // until a vertex repeats.
    let mut walk = vec![start];
    let mut seen = vec![usize::MAX; m];
    seen[start] = 0;
    loop {
        let v = *walk.last().expect("walk is never empty");
        let pred = (0..m)
            .find(|&u| !done[u] && edge(u, v))
            .expect("leftover vertices always have a leftover predecessor");
        if seen[pred] != usize::MAX {
            let mut cycle: Vec<usize> = walk[seen[pred]..].to_vec();
            cycle.reverse();
            let pos = cycle
                .iter()
                .enumerate()
                .min_by_key(|(_, &v)| v)
                .map(|(i, _)| i)
                .unwrap_or(0);
            cycle.rotate_left(pos);
            return DagReport::Cycle(cycle);
        }
        seen[pred] = walk.len();
        walk.push(pred);
    }
}
