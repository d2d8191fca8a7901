//! Hierarchy graph over Tree Number positions and the two gold relations used
//! by the probes: hop distance (all-pairs shortest paths) and the number of
//! shared ancestors.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::io::{Read, Write};

use thiserror::Error;

use crate::thesaurus::{Thesaurus, TreeNumber};

/// Branches kept by default: Health Care, Techniques and Equipment, Diseases,
/// Chemicals and Drugs, Phenomena and Processes.
pub const DEFAULT_BRANCHES: &str = "NECDG";

/// Marker for unreachable pairs in [`DistanceOracle`].
pub const INFINITE: u16 = u16::MAX;

/// Default cap on the node count accepted by [`shortest_path_matrix`].
pub const DEFAULT_NODE_CAP: usize = 6000;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("no descriptor falls in branches {0:?}")]
    EmptyGraph(String),
    #[error("graph has {nodes} nodes, cap is {cap}")]
    GraphTooLarge { nodes: usize, cap: usize },
    #[error("descriptor {0:?} has no position in the graph")]
    DescriptorNotInGraph(String),
    #[error("unknown descriptor {0:?}")]
    UnknownDescriptor(String),
    #[error("invalid branch letter {0:?}")]
    InvalidBranch(char),
    #[error("bad distance cache: {0}")]
    BadCache(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct GraphOptions {
    /// Letters whose Tree Numbers are kept.
    pub branches: BTreeSet<char>,
    /// Adds one node per branch letter above the two-digit top codes, so that
    /// e.g. `C01` and `C04` are connected through `C`.
    pub category_nodes: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            branches: DEFAULT_BRANCHES.chars().collect(),
            category_nodes: true,
        }
    }
}

impl GraphOptions {
    pub fn with_branches(letters: &str) -> Result<Self, HierarchyError> {
        let mut branches = BTreeSet::new();
        for c in letters.chars() {
            if !c.is_ascii_uppercase() {
                return Err(HierarchyError::InvalidBranch(c));
            }
            branches.insert(c);
        }
        Ok(GraphOptions {
            branches,
            ..GraphOptions::default()
        })
    }

    pub fn all_branches() -> Self {
        GraphOptions {
            branches: ('A'..='Z').collect(),
            ..GraphOptions::default()
        }
    }
}

/// Undirected graph over Tree Number positions.
#[derive(Debug, Clone)]
pub struct HierarchyGraph {
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
    node_to_descriptor: Vec<Option<String>>,
    descriptor_nodes: HashMap<String, Vec<usize>>,
    options: GraphOptions,
}

fn position_keys(tn: &TreeNumber, category_nodes: bool) -> Vec<String> {
    let mut keys = Vec::with_capacity(tn.depth() + 1);
    if category_nodes {
        keys.push(tn.branch().to_string());
    }
    keys.extend((1..=tn.depth()).map(|n| tn.prefix(n).to_string()));
    keys
}

/// Builds the graph of all prefixes of the Tree Numbers in the selected branches.
pub fn build_graph(th: &Thesaurus, options: &GraphOptions) -> Result<HierarchyGraph, HierarchyError> {
    let mut node_set = BTreeSet::new();
    let mut edges = BTreeSet::new();
    for d in th.descriptors() {
        for tn in d.tree_numbers.iter().filter(|t| options.branches.contains(&t.branch())) {
            let keys = position_keys(tn, options.category_nodes);
            for w in keys.windows(2) {
                edges.insert((w[0].clone(), w[1].clone()));
            }
            node_set.extend(keys);
        }
    }
    if node_set.is_empty() {
        let letters: String = options.branches.iter().collect();
        return Err(HierarchyError::EmptyGraph(letters));
    }
    let nodes: Vec<String> = node_set.into_iter().collect();
    let index: HashMap<String, usize> = nodes.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    let mut adjacency = vec![Vec::new(); nodes.len()];
    let mut parent = vec![None; nodes.len()];
    for (p, c) in &edges {
        let (pi, ci) = (index[p], index[c]);
        adjacency[pi].push(ci);
        adjacency[ci].push(pi);
        parent[ci] = Some(pi);
    }
    let mut node_to_descriptor = vec![None; nodes.len()];
    let mut descriptor_nodes: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if let Some(owner) = th.owner(n) {
            node_to_descriptor[i] = Some(owner.to_string());
            descriptor_nodes.entry(owner.to_string()).or_default().push(i);
        }
    }
    Ok(HierarchyGraph {
        nodes,
        index,
        adjacency,
        parent,
        node_to_descriptor,
        descriptor_nodes,
        options: options.clone(),
    })
}

impl HierarchyGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn descriptor_of(&self, node: usize) -> Option<&str> {
        self.node_to_descriptor[node].as_deref()
    }

    pub fn options(&self) -> &GraphOptions {
        &self.options
    }

    /// Positions of a descriptor inside the graph (empty if filtered out).
    pub fn descriptor_nodes(&self, id: &str) -> &[usize] {
        self.descriptor_nodes.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains_descriptor(&self, id: &str) -> bool {
        self.descriptor_nodes.contains_key(id)
    }

    /// Descriptor ids with at least one position in the graph, sorted.
    pub fn descriptors(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.descriptor_nodes.keys().map(String::as_str).collect();
        ids.sort_unstable();
        ids
    }

    fn require(&self, id: &str) -> Result<&[usize], HierarchyError> {
        match self.descriptor_nodes.get(id) {
            Some(n) => Ok(n),
            None => Err(HierarchyError::DescriptorNotInGraph(id.to_string())),
        }
    }

    /// Hop distances from `source` by breadth-first search.
    pub fn bfs(&self, source: usize) -> Vec<u16> {
        let mut dist = vec![INFINITE; self.nodes.len()];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if dist[v] == INFINITE {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Dense all-pairs hop distances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceOracle {
    nodes: Vec<String>,
    dist: Vec<u16>,
}

/// Floyd-Warshall over the unit-weight graph, capped at `node_cap` nodes.
pub fn shortest_path_matrix(g: &HierarchyGraph, node_cap: usize) -> Result<DistanceOracle, HierarchyError> {
    let n = g.node_count();
    if n > node_cap {
        return Err(HierarchyError::GraphTooLarge { nodes: n, cap: node_cap });
    }
    let mut dist = vec![INFINITE; n * n];
    for i in 0..n {
        dist[i * n + i] = 0;
        for &j in g.neighbors(i) {
            dist[i * n + j] = 1;
        }
    }
    let mut row_k = vec![INFINITE; n];
    for k in 0..n {
        row_k.copy_from_slice(&dist[k * n..(k + 1) * n]);
        for i in 0..n {
            let dik = dist[i * n + k];
            if dik == INFINITE {
                continue;
            }
            let row_i = &mut dist[i * n..(i + 1) * n];
            for (dij, &dkj) in row_i.iter_mut().zip(&row_k) {
                if dkj != INFINITE {
                    let through = dik + dkj;
                    if through < *dij {
                        *dij = through;
                    }
                }
            }
        }
    }
    Ok(DistanceOracle {
        nodes: g.nodes().to_vec(),
        dist,
    })
}

const DST_MAGIC: &[u8; 4] = b"DST1";

impl DistanceOracle {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    /// `None` when the two nodes are disconnected.
    pub fn get(&self, i: usize, j: usize) -> Option<u16> {
        match self.dist[i * self.nodes.len() + j] {
            INFINITE => None,
            d => Some(d),
        }
    }

    pub fn raw(&self, i: usize, j: usize) -> u16 {
        self.dist[i * self.nodes.len() + j]
    }

    /// Cache layout: `DST1`, u32 node count, length-prefixed (u32) UTF-8 node
    /// names, then row-major u16 distances with `0xFFFF` for unreachable;
    /// little-endian throughout.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<(), HierarchyError> {
        w.write_all(DST_MAGIC)?;
        w.write_all(&(self.nodes.len() as u32).to_le_bytes())?;
        for n in &self.nodes {
            w.write_all(&(n.len() as u32).to_le_bytes())?;
            w.write_all(n.as_bytes())?;
        }
        for d in &self.dist {
            w.write_all(&d.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self, HierarchyError> {
        let bad = |m: &str| HierarchyError::BadCache(m.to_string());
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = buf.as_slice();
        let mut take = |n: usize| -> Result<&[u8], HierarchyError> {
            if cur.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != DST_MAGIC {
            return Err(bad("magic"));
        }
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len)?).map_err(|_| bad("utf-8"))?;
            nodes.push(name.to_string());
        }
        let raw = take(n * n * 2)?;
        let dist = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(DistanceOracle { nodes, dist })
    }
}

/// Minimum hop distance over all position pairs of two descriptors.
pub fn descriptor_distance(
    g: &HierarchyGraph,
    oracle: &DistanceOracle,
    a: &str,
    b: &str,
) -> Result<Option<u16>, HierarchyError> {
    let na = g.require(a)?;
    let nb = g.require(b)?;
    let best = na
        .iter()
        .flat_map(|&i| nb.iter().map(move |&j| oracle.raw(i, j)))
        .min()
        .unwrap_or(INFINITE);
    Ok((best != INFINITE).then_some(best))
}

/// Ancestor positions of a descriptor: branch letters and proper prefixes of
/// all its Tree Numbers, minus the descriptor's own positions.
pub fn ancestor_positions(th: &Thesaurus, id: &str) -> Result<BTreeSet<String>, HierarchyError> {
    let d = th
        .get(id)
        .ok_or_else(|| HierarchyError::UnknownDescriptor(id.to_string()))?;
    let own: HashSet<String> = d.tree_numbers.iter().map(|t| t.to_string()).collect();
    let mut out = BTreeSet::new();
    for tn in &d.tree_numbers {
        out.insert(tn.branch().to_string());
        out.extend(tn.proper_prefixes().map(|p| p.to_string()));
    }
    out.retain(|p| !own.contains(p));
    Ok(out)
}

/// Number of distinct ancestor positions shared by two descriptors.
pub fn common_ancestor_count(th: &Thesaurus, a: &str, b: &str) -> Result<usize, HierarchyError> {
    let aa = ancestor_positions(th, a)?;
    let ab = ancestor_positions(th, b)?;
    Ok(aa.intersection(&ab).count())
}

/// Descriptors sharing a parent position with one of `a`'s positions.
pub fn siblings(th: &Thesaurus, g: &HierarchyGraph, a: &str) -> Result<BTreeSet<String>, HierarchyError> {
    let nodes = g.require(a)?;
    let d = th
        .get(a)
        .ok_or_else(|| HierarchyError::UnknownDescriptor(a.to_string()))?;
    let parents: HashSet<String> = nodes
        .iter()
        .map(|&n| TreeNumber::parse(&g.nodes[n]).expect("graph node").parent_key())
        .collect();
    let mut out = BTreeSet::new();
    // single-segment positions hang off the branch letter, which may not be a node
    for (i, name) in g.nodes.iter().enumerate() {
        let Some(owner) = g.node_to_descriptor[i].as_deref() else { continue };
        if owner == d.id {
            continue;
        }
        let parent_key = match name.rfind('.') {
            Some(dot) => &name[..dot],
            None => &name[..1],
        };
        if parents.contains(parent_key) {
            out.insert(owner.to_string());
        }
    }
    Ok(out)
}

/// Descriptors owning a proper prefix of one of `a`'s Tree Numbers.
pub fn ancestors(th: &Thesaurus, g: &HierarchyGraph, a: &str) -> Result<BTreeSet<String>, HierarchyError> {
    let nodes = g.require(a)?;
    let mut out = BTreeSet::new();
    for &n in nodes {
        let tn = TreeNumber::parse(&g.nodes[n]).expect("graph node");
        for p in tn.proper_prefixes() {
            if let Some(owner) = th.owner(&p.to_string()) {
                if owner != a {
                    out.insert(owner.to_string());
                }
            }
        }
    }
    Ok(out)
}

/// Mean Tree Number depth of a descriptor.
pub fn depth(th: &Thesaurus, a: &str) -> Result<f64, HierarchyError> {
    th.get(a)
        .map(|d| d.depth())
        .ok_or_else(|| HierarchyError::UnknownDescriptor(a.to_string()))
}
