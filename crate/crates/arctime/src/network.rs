//! Directed road network: nodes with planar coordinates, arcs with lengths and
//! road classes, and the routing primitives the rest of the crate builds on.
//!
//! All routing here is deterministic. Shortest paths break cost ties by the
//! lexicographically smallest arc id sequence, route enumeration emits routes
//! in depth-first discovery order with arcs expanded in ascending id order,
//! and nearest-element queries break distance ties by smallest id.

use std::collections::{BinaryHeap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Functional classification of a street, coarse grouping used for priors
/// and for borrowing estimates between arcs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadClass {
    Primary,
    Secondary,
    Tertiary,
}

impl RoadClass {
    pub fn parse(s: &str) -> Option<RoadClass> {
        match s.to_ascii_lowercase().as_str() {
            "primary" => Some(RoadClass::Primary),
            "secondary" => Some(RoadClass::Secondary),
            "tertiary" => Some(RoadClass::Tertiary),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RoadClass::Primary => "primary",
            RoadClass::Secondary => "secondary",
            RoadClass::Tertiary => "tertiary",
        }
    }
}

impl fmt::Display for RoadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Intersection or endpoint in planar metric coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

/// One direction of travel along a street segment. Two-way streets are two
/// arcs that reference each other through `reverse`.
#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    /// Segment length in meters, strictly positive.
    pub length: f64,
    pub class: RoadClass,
    /// Id of the opposite-direction arc, if the street is two-way.
    pub reverse: Option<u32>,
}

/// Contiguous sequence of arc ids. The node sequence is implied by the
/// network; a valid path never repeats a node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Path {
    arcs: Vec<u32>,
}

impl Path {
    pub fn new(arcs: Vec<u32>) -> Path {
        Path { arcs }
    }

    pub fn arcs(&self) -> &[u32] {
        &self.arcs
    }

    pub fn len(&self) -> usize {
        self.arcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }
}

impl From<Vec<u32>> for Path {
    fn from(arcs: Vec<u32>) -> Path {
        Path::new(arcs)
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("failed reading {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: u64, msg: String },
    #[error("duplicate node id {0}")]
    DuplicateNode(u32),
    #[error("duplicate arc id {0}")]
    DuplicateArc(u32),
    #[error("node {node}: coordinate is not finite")]
    BadCoordinate { node: u32 },
    #[error("arc {arc}: endpoint node {node} does not exist")]
    MissingEndpoint { arc: u32, node: u32 },
    #[error("arc {arc}: length {length} is not a positive finite number")]
    BadLength { arc: u32, length: f64 },
    #[error("arc {arc}: from and to are both node {node}")]
    SelfLoop { arc: u32, node: u32 },
    #[error("arc {arc}: reverse arc {reverse} does not exist")]
    MissingReverse { arc: u32, reverse: u32 },
    #[error("arc {arc}: reverse arc {reverse} does not run in the opposite direction")]
    MismatchedReverse { arc: u32, reverse: u32 },
    #[error("network has no nodes")]
    Empty,
    #[error("unknown node id {0}")]
    UnknownNode(u32),
    #[error("unknown arc id {0}")]
    UnknownArc(u32),
}

/// Lookup from sparse external ids to dense indices. Uses a flat table when
/// the id range is close to dense, a hash map otherwise.
#[derive(Debug, Clone)]
enum IdIndex {
    Dense(Vec<u32>),
    Sparse(HashMap<u32, u32>),
}

const DENSE_SENTINEL: u32 = u32::MAX;

impl IdIndex {
    fn build(ids: impl Iterator<Item = u32> + Clone, len: usize) -> IdIndex {
        let max_id = ids.clone().max().unwrap_or(0) as usize;
        if max_id < 4 * len.max(1) {
            let mut table = vec![DENSE_SENTINEL; max_id + 1];
            for (idx, id) in ids.enumerate() {
                table[id as usize] = idx as u32;
            }
            IdIndex::Dense(table)
        } else {
            IdIndex::Sparse(ids.enumerate().map(|(idx, id)| (id, idx as u32)).collect())
        }
    }

    fn get(&self, id: u32) -> Option<usize> {
        match self {
            IdIndex::Dense(t) => t
                .get(id as usize)
                .copied()
                .filter(|&v| v != DENSE_SENTINEL)
                .map(|v| v as usize),
            IdIndex::Sparse(m) => m.get(&id).map(|&v| v as usize),
        }
    }
}

/// Validated road network with adjacency prepared for routing.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    arcs: Vec<Arc>,
    node_idx: IdIndex,
    arc_idx: IdIndex,
    /// Outgoing arc indices per node index, ascending arc id.
    out: Vec<Vec<u32>>,
    /// Incoming arc indices per node index, ascending arc id.
    inn: Vec<Vec<u32>>,
}

impl RoadNetwork {
    pub fn from_parts(mut nodes: Vec<Node>, mut arcs: Vec<Arc>) -> Result<RoadNetwork, NetworkError> {
        if nodes.is_empty() {
            return Err(NetworkError::Empty);
        }
        nodes.sort_by_key(|n| n.id);
        arcs.sort_by_key(|a| a.id);
        for w in nodes.windows(2) {
            if w[0].id == w[1].id {
                return Err(NetworkError::DuplicateNode(w[0].id));
            }
        }
        for w in arcs.windows(2) {
            if w[0].id == w[1].id {
                return Err(NetworkError::DuplicateArc(w[0].id));
            }
        }
        for n in &nodes {
            if !n.x.is_finite() || !n.y.is_finite() {
                return Err(NetworkError::BadCoordinate { node: n.id });
            }
        }
        let node_idx = IdIndex::build(nodes.iter().map(|n| n.id), nodes.len());
        let arc_idx = IdIndex::build(arcs.iter().map(|a| a.id), arcs.len());
        let mut out = vec![Vec::new(); nodes.len()];
        let mut inn = vec![Vec::new(); nodes.len()];
        for (i, a) in arcs.iter().enumerate() {
            if !(a.length.is_finite() && a.length > 0.0) {
                return Err(NetworkError::BadLength { arc: a.id, length: a.length });
            }
            if a.from == a.to {
                return Err(NetworkError::SelfLoop { arc: a.id, node: a.from });
            }
            let from = node_idx
                .get(a.from)
                .ok_or(NetworkError::MissingEndpoint { arc: a.id, node: a.from })?;
            let to = node_idx
                .get(a.to)
                .ok_or(NetworkError::MissingEndpoint { arc: a.id, node: a.to })?;
            if let Some(rev) = a.reverse {
                let r = arc_idx
                    .get(rev)
                    .ok_or(NetworkError::MissingReverse { arc: a.id, reverse: rev })?;
                let rarc = &arcs[r];
                if rarc.from != a.to || rarc.to != a.from {
                    return Err(NetworkError::MismatchedReverse { arc: a.id, reverse: rev });
                }
            }
            out[from].push(i as u32);
            inn[to].push(i as u32);
        }
        // Arcs were sorted by id, so adjacency lists are ascending already.
        Ok(RoadNetwork { nodes, arcs, node_idx, arc_idx, out, inn })
    }

    /// Loads a network from the two CSV files (`node_id,x_m,y_m` and
    /// `arc_id,from_node,to_node,length_m,road_class,reverse_arc_id`,
    /// reverse id -1 meaning one-way).
    pub fn load(nodes_path: &FsPath, arcs_path: &FsPath) -> Result<RoadNetwork, NetworkError> {
        let nodes = read_nodes_csv(nodes_path)?;
        let arcs = read_arcs_csv(arcs_path)?;
        RoadNetwork::from_parts(nodes, arcs)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    /// Nodes in ascending id order. Index positions here match every
    /// per-node slice returned by this type.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Arcs in ascending id order. Index positions here match every
    /// per-arc slice accepted or returned by this type.
    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn node_index(&self, id: u32) -> Result<usize, NetworkError> {
        self.node_idx.get(id).ok_or(NetworkError::UnknownNode(id))
    }

    pub fn arc_index(&self, id: u32) -> Result<usize, NetworkError> {
        self.arc_idx.get(id).ok_or(NetworkError::UnknownArc(id))
    }

    pub fn node(&self, id: u32) -> &Node {
        &self.nodes[self.node_index(id).expect("node id not in network")]
    }

    pub fn arc(&self, id: u32) -> &Arc {
        &self.arcs[self.arc_index(id).expect("arc id not in network")]
    }

    pub fn has_node(&self, id: u32) -> bool {
        self.node_idx.get(id).is_some()
    }

    /// Outgoing arcs of a node, ascending arc id.
    pub fn out_arcs(&self, node_id: u32) -> impl Iterator<Item = &Arc> + '_ {
        let idx = self.node_index(node_id).expect("node id not in network");
        self.out[idx].iter().map(move |&a| &self.arcs[a as usize])
    }

    /// Smaller of an arc's own id and its reverse id; both directions of a
    /// two-way street share one canonical id.
    pub fn canonical_arc_id(&self, arc_id: u32) -> u32 {
        let a = self.arc(arc_id);
        match a.reverse {
            Some(r) => arc_id.min(r),
            None => arc_id,
        }
    }

    /// Node closest in Euclidean distance; ties go to the smallest id.
    pub fn nearest_node(&self, x: f64, y: f64) -> u32 {
        let mut best = (f64::INFINITY, u32::MAX);
        for n in &self.nodes {
            let d2 = (n.x - x).powi(2) + (n.y - y).powi(2);
            if d2 < best.0 || (d2 == best.0 && n.id < best.1) {
                best = (d2, n.id);
            }
        }
        best.1
    }

    /// Canonical id of the arc whose segment is closest to the point. Both
    /// directions of a street are the same segment, so queries are merged
    /// onto the canonical id; ties go to the smallest canonical id.
    pub fn nearest_arc(&self, x: f64, y: f64) -> u32 {
        let mut best = (f64::INFINITY, u32::MAX);
        for a in &self.arcs {
            let canon = match a.reverse {
                Some(r) => a.id.min(r),
                None => a.id,
            };
            let from = self.node(a.from);
            let to = self.node(a.to);
            let d2 = point_segment_dist2(x, y, from.x, from.y, to.x, to.y);
            if d2 < best.0 || (d2 == best.0 && canon < best.1) {
                best = (d2, canon);
            }
        }
        best.1
    }

    /// Node id sequence of a path, starting node included.
    pub fn path_nodes(&self, path: &Path) -> Vec<u32> {
        let mut nodes = Vec::with_capacity(path.len() + 1);
        for (k, &aid) in path.arcs().iter().enumerate() {
            let a = self.arc(aid);
            if k == 0 {
                nodes.push(a.from);
            }
            nodes.push(a.to);
        }
        nodes
    }

    pub fn path_length(&self, path: &Path) -> f64 {
        path.arcs().iter().map(|&a| self.arc(a).length).sum()
    }

    /// Checks contiguity, endpoints, and the no-repeated-node rule.
    pub fn path_is_valid(&self, path: &Path, start: u32, end: u32) -> bool {
        if path.is_empty() {
            return false;
        }
        let mut seen = HashSet::new();
        let mut at = start;
        seen.insert(start);
        for &aid in path.arcs() {
            let Ok(idx) = self.arc_index(aid) else { return false };
            let a = &self.arcs[idx];
            if a.from != at {
                return false;
            }
            at = a.to;
            if !seen.insert(at) {
                return false;
            }
        }
        at == end
    }

    /// Minimum-cost path under per-arc nonnegative `weights` (indexed like
    /// [`RoadNetwork::arcs`]). Cost ties are broken by the lexicographically
    /// smallest arc id sequence, making the result unique and reproducible.
    /// `start == end` yields an empty path of zero cost. Returns `None` when
    /// `end` is unreachable.
    pub fn shortest_path(
        &self,
        weights: &[f64],
        start: u32,
        end: u32,
    ) -> Result<Option<(Path, f64)>, NetworkError> {
        assert_eq!(weights.len(), self.arcs.len(), "one weight per arc required");
        debug_assert!(weights.iter().all(|w| w.is_finite() && *w >= 0.0));
        let s = self.node_index(start)?;
        let t = self.node_index(end)?;
        if s == t {
            return Ok(Some((Path::default(), 0.0)));
        }

        // Labels carry the whole arc id sequence so that equal-cost paths
        // settle in lexicographic order. Fine at the network sizes this
        // crate targets; revisit with a parent-pointer scheme if networks
        // grow past tens of thousands of arcs.
        #[derive(PartialEq)]
        struct Entry {
            cost: f64,
            path: Vec<u32>,
            node: usize,
        }
        impl Eq for Entry {}
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                // Reversed: BinaryHeap is a max-heap and we want smallest first.
                other
                    .cost
                    .total_cmp(&self.cost)
                    .then_with(|| other.path.cmp(&self.path))
                    .then_with(|| other.node.cmp(&self.node))
            }
        }
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }

        let mut settled = vec![false; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        heap.push(Entry { cost: 0.0, path: Vec::new(), node: s });
        while let Some(Entry { cost, path, node }) = heap.pop() {
            if settled[node] {
                continue;
            }
            settled[node] = true;
            if node == t {
                return Ok(Some((Path::new(path), cost)));
            }
            for &ai in &self.out[node] {
                let a = &self.arcs[ai as usize];
                let to = self.node_idx.get(a.to).unwrap();
                if settled[to] {
                    continue;
                }
                let mut next = path.clone();
                next.push(a.id);
                heap.push(Entry { cost: cost + weights[ai as usize], path: next, node: to });
            }
        }
        Ok(None)
    }

    /// Every simple route from `d1` to `d2` using at most `max_arcs` arcs
    /// whose interior nodes avoid `forbidden`. The endpoints themselves are
    /// always allowed. Routes come out in depth-first discovery order with
    /// arcs expanded in ascending id order. `d1 == d2` yields no routes.
    pub fn enumerate_local_routes(
        &self,
        d1: u32,
        d2: u32,
        max_arcs: usize,
        forbidden: &HashSet<u32>,
    ) -> Result<Vec<Path>, NetworkError> {
        let s = self.node_index(d1)?;
        let t = self.node_index(d2)?;
        if s == t || max_arcs == 0 {
            return Ok(Vec::new());
        }

        // Hop distances toward d2 on the subgraph without forbidden nodes,
        // used to prune branches that cannot reach d2 in the arcs left.
        let hops = {
            let mut h = vec![u32::MAX; self.nodes.len()];
            let mut q = VecDeque::new();
            h[t] = 0;
            q.push_back(t);
            while let Some(v) = q.pop_front() {
                if h[v] as usize >= max_arcs {
                    continue;
                }
                for &ai in &self.inn[v] {
                    let a = &self.arcs[ai as usize];
                    let u = self.node_idx.get(a.from).unwrap();
                    let blocked = u != s && forbidden.contains(&a.from);
                    if !blocked && h[u] == u32::MAX {
                        h[u] = h[v] + 1;
                        q.push_back(u);
                    }
                }
            }
            h
        };
        if hops[s] == u32::MAX {
            return Ok(Vec::new());
        }

        let mut routes = Vec::new();
        let mut arc_stack: Vec<u32> = Vec::new();
        let mut on_route = vec![false; self.nodes.len()];
        on_route[s] = true;
        self.route_dfs(s, t, max_arcs, forbidden, &hops, &mut arc_stack, &mut on_route, &mut routes);
        Ok(routes)
    }

    #[allow(clippy::too_many_arguments)]
    fn route_dfs(
        &self,
        at: usize,
        t: usize,
        max_arcs: usize,
        forbidden: &HashSet<u32>,
        hops: &[u32],
        arc_stack: &mut Vec<u32>,
        on_route: &mut [bool],
        routes: &mut Vec<Path>,
    ) {
        for &ai in &self.out[at] {
            let a = &self.arcs[ai as usize];
            let to = self.node_idx.get(a.to).unwrap();
            if to == t {
                let mut arcs = arc_stack.clone();
                arcs.push(a.id);
                routes.push(Path::new(arcs));
                continue;
            }
            if arc_stack.len() + 1 >= max_arcs {
                continue;
            }
            if on_route[to] || forbidden.contains(&a.to) {
                continue;
            }
            if hops[to] == u32::MAX || arc_stack.len() + 1 + hops[to] as usize > max_arcs {
                continue;
            }
            arc_stack.push(a.id);
            on_route[to] = true;
            self.route_dfs(to, t, max_arcs, forbidden, hops, arc_stack, on_route, routes);
            on_route[to] = false;
            arc_stack.pop();
        }
    }

    /// Minimum cost to reach `target` from every node, indexed like
    /// [`RoadNetwork::nodes`]; `INFINITY` where the target is unreachable.
    pub fn time_to_target_map(&self, weights: &[f64], target: u32) -> Result<Vec<f64>, NetworkError> {
        assert_eq!(weights.len(), self.arcs.len(), "one weight per arc required");
        let t = self.node_index(target)?;
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut settled = vec![false; self.nodes.len()];
        let mut heap: BinaryHeap<std::cmp::Reverse<(ordered::F64, usize)>> = BinaryHeap::new();
        dist[t] = 0.0;
        heap.push(std::cmp::Reverse((ordered::F64(0.0), t)));
        while let Some(std::cmp::Reverse((ordered::F64(d), v))) = heap.pop() {
            if settled[v] {
                continue;
            }
            settled[v] = true;
            for &ai in &self.inn[v] {
                let a = &self.arcs[ai as usize];
                let u = self.node_idx.get(a.from).unwrap();
                let nd = d + weights[ai as usize];
                if nd < dist[u] {
                    dist[u] = nd;
                    heap.push(std::cmp::Reverse((ordered::F64(nd), u)));
                }
            }
        }
        Ok(dist)
    }
}

/// Total-ordered f64 wrapper for use as a heap key; never holds NaN.
mod ordered {
    #[derive(PartialEq)]
    pub struct F64(pub f64);
    impl Eq for F64 {}
    impl Ord for F64 {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0)
        }
    }
    impl PartialOrd for F64 {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
}

fn point_segment_dist2(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    (px - cx).powi(2) + (py - cy).powi(2)
}

#[derive(Debug, Deserialize)]
struct NodeRecord {
    node_id: u32,
    x_m: f64,
    y_m: f64,
}

#[derive(Debug, Deserialize)]
struct ArcRecord {
    arc_id: u32,
    from_node: u32,
    to_node: u32,
    length_m: f64,
    road_class: String,
    reverse_arc_id: i64,
}

fn read_nodes_csv(path: &FsPath) -> Result<Vec<Node>, NetworkError> {
    let file = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| wrap_csv_error(&file, e))?;
    let mut nodes = Vec::new();
    for result in rdr.deserialize::<NodeRecord>() {
        let rec = result.map_err(|e| wrap_csv_error(&file, e))?;
        nodes.push(Node { id: rec.node_id, x: rec.x_m, y: rec.y_m });
    }
    Ok(nodes)
}

fn read_arcs_csv(path: &FsPath) -> Result<Vec<Arc>, NetworkError> {
    let file = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| wrap_csv_error(&file, e))?;
    let mut arcs = Vec::new();
    for (i, result) in rdr.deserialize::<ArcRecord>().enumerate() {
        let rec = result.map_err(|e| wrap_csv_error(&file, e))?;
        let class = RoadClass::parse(&rec.road_class).ok_or_else(|| NetworkError::Parse {
            file: file.clone(),
            line: i as u64 + 2,
            msg: format!("unknown road class {:?}", rec.road_class),
        })?;
        let reverse = match rec.reverse_arc_id {
            -1 => None,
            r if r >= 0 && r <= u32::MAX as i64 => Some(r as u32),
            r => {
                return Err(NetworkError::Parse {
                    file,
                    line: i as u64 + 2,
                    msg: format!("bad reverse arc id {r}"),
                })
            }
        };
        arcs.push(Arc {
            id: rec.arc_id,
            from: rec.from_node,
            to: rec.to_node,
            length: rec.length_m,
            class,
            reverse,
        });
    }
    Ok(arcs)
}

fn wrap_csv_error(file: &str, e: csv::Error) -> NetworkError {
    let line = match e.position() {
        Some(p) => p.line(),
        None => 0,
    };
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => NetworkError::Io { file: file.to_string(), source: io },
            _ => unreachable!(),
        }
    } else {
        NetworkError::Parse { file: file.to_string(), line, msg: e.to_string() }
    }
}

/// Writes the two network CSV files into `dir` as `nodes.csv` and `arcs.csv`.
pub fn save_network(net: &RoadNetwork, dir: &FsPath) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_path(dir.join("nodes.csv"))?;
    w.write_record(["node_id", "x_m", "y_m"])?;
    for n in net.nodes() {
        w.write_record(&[n.id.to_string(), n.x.to_string(), n.y.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("arcs.csv"))?;
    w.write_record(["arc_id", "from_node", "to_node", "length_m", "road_class", "reverse_arc_id"])?;
    for a in net.arcs() {
        let rev = a.reverse.map(|r| r as i64).unwrap_or(-1);
        w.write_record(&[
            a.id.to_string(),
            a.from.to_string(),
            a.to.to_string(),
            a.length.to_string(),
            a.class.to_string(),
            rev.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
