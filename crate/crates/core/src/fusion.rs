//! Kernel-launch accounting for operator fusion on an encoder graph.
//!
//! Fusion rules replace a run of primitive kernels with fewer combined
//! kernels; nothing here executes math. The unit of account is the
//! kernel launch: a graph's unfused cost is its node count per phase,
//! and enabling rules rewrites matched runs to their fused counts while
//! unmatched nodes keep costing one launch each.
//!
//! Matching is greedy leftmost-longest over each phase's nodes in id
//! order: at every position the longest matching pattern wins and the
//! scan resumes past it, so matches never overlap. Two different rules
//! matching the same position at the same length have no defined winner
//! and raise [`FusionError::AmbiguousMatch`]; the shipped rule set
//! cannot tie because the only overlapping patterns are strict
//! prefixes of one another (a bare linear layer versus the
//! linear-GeLU-linear block).

use serde::Serialize;
use thiserror::Error;

/// Errors for graph validation and rule matching.
#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("malformed graph: {reason}")]
    InvalidGraph { reason: String },
    #[error("malformed rule set: {reason}")]
    InvalidRule { reason: String },
    /// Two rules matched the same run of nodes at the same length;
    /// greedy matching has no defined winner.
    #[error("rules {first} and {second} both match {len} {phase} nodes at position {position}")]
    AmbiguousMatch {
        phase: Phase,
        position: usize,
        len: usize,
        first: RuleName,
        second: RuleName,
    },
}

/// Primitive kernel taxonomy. Backward kernels reuse the kind of the
/// operation they differentiate (a weight-gradient GEMM is still a
/// GEMM); what distinguishes them is the phase tag on the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum NodeKind {
    Gemm,
    BiasAdd,
    Attention,
    Gelu,
    Dropout,
    Add,
    LayerNorm,
    /// Row or column reduction: bias gradients, layernorm statistics
    /// and affine-parameter gradients.
    Reduction,
    /// Accumulation of a residual branch's gradient into the trunk
    /// gradient.
    ResidualGradAdd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Phase {
    Forward,
    Backward,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
        })
    }
}

/// One primitive kernel launch. Backward nodes carry the id of the
/// forward node they differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpNode {
    pub id: usize,
    pub kind: NodeKind,
    pub phase: Phase,
    pub forward_source: Option<usize>,
}

/// An operator graph: nodes in execution (id) order plus dataflow
/// edges. Always acyclic; every backward node is linked to a forward
/// source.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpGraph {
    nodes: Vec<OpNode>,
    edges: Vec<(usize, usize)>,
}

impl OpGraph {
    pub fn new(nodes: Vec<OpNode>, edges: Vec<(usize, usize)>) -> Result<Self, FusionError> {
        let graph = Self { nodes, edges };
        graph.validate()?;
        Ok(graph)
    }

    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn phase_len(&self, phase: Phase) -> usize {
        self.nodes.iter().filter(|n| n.phase == phase).count()
    }

    fn phase_kinds(&self, phase: Phase) -> Vec<NodeKind> {
        self.nodes
            .iter()
            .filter(|n| n.phase == phase)
            .map(|n| n.kind)
            .collect()
    }

    fn validate(&self) -> Result<(), FusionError> {
        let n = self.nodes.len();
        let fail = |reason: String| Err(FusionError::InvalidGraph { reason });
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return fail(format!("node at position {i} has id {}", node.id));
            }
            match (node.phase, node.forward_source) {
                (Phase::Forward, Some(_)) => {
                    return fail(format!("forward node {i} has a forward source"));
                }
                (Phase::Backward, None) => {
                    return fail(format!("backward node {i} has no forward source"));
                }
                (Phase::Backward, Some(src)) => {
                    if self.nodes.get(src).map(|s| s.phase) != Some(Phase::Forward) {
                        return fail(format!(
                            "backward node {i} points at {src}, which is not a forward node"
                        ));
                    }
                }
                (Phase::Forward, None) => {}
            }
        }
        let mut indegree = vec![0usize; n];
        let mut adjacency = vec![Vec::new(); n];
        for &(from, to) in &self.edges {
            if from >= n || to >= n {
                return fail(format!("edge ({from}, {to}) leaves the graph"));
            }
            if from == to {
                return fail(format!("edge ({from}, {to}) is a self-loop"));
            }
            adjacency[from].push(to);
            indegree[to] += 1;
        }
        // Kahn's algorithm; any node never released sits on a cycle.
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut released = 0usize;
        while let Some(i) = ready.pop() {
            released += 1;
            for &j in &adjacency[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push(j);
                }
            }
        }
        if released != n {
            return fail("dataflow contains a cycle".to_string());
        }
        Ok(())
    }

    /// One transformer encoder layer, forward and backward, in the
    /// decomposition a layer-by-layer framework launches: packed QKV
    /// projection, attention, output projection, the first
    /// dropout-add-layernorm block, the two-GEMM feed-forward with GeLU,
    /// and the second dropout-add-layernorm block. The backward phase
    /// walks the same structure in reverse; the QKV projection's
    /// backward orders weight gradient and bias reduction before the
    /// input gradient, whose consumer is the residual accumulation.
    pub fn canonical_encoder_graph() -> OpGraph {
        use NodeKind::*;
        let fwd = |id, kind| OpNode {
            id,
            kind,
            phase: Phase::Forward,
            forward_source: None,
        };
        let bwd = |id, kind, src| OpNode {
            id,
            kind,
            phase: Phase::Backward,
            forward_source: Some(src),
        };
        let nodes = vec![
            // Attention block.
            fwd(0, Gemm),     // QKV projection
            fwd(1, BiasAdd),  // QKV bias
            fwd(2, Attention),
            fwd(3, Gemm),     // output projection
            fwd(4, BiasAdd),  // output-projection bias
            fwd(5, Dropout),
            fwd(6, Add),      // residual join with the block input
            fwd(7, LayerNorm),
            // Feed-forward block.
            fwd(8, Gemm),     // expansion
            fwd(9, BiasAdd),
            fwd(10, Gelu),
            fwd(11, Gemm),    // contraction
            fwd(12, BiasAdd),
            fwd(13, Dropout),
            fwd(14, Add),     // residual join with node 7's output
            fwd(15, LayerNorm),
            // Backward, second layernorm block.
            bwd(16, Reduction, 15), // layernorm statistics
            bwd(17, LayerNorm, 15), // input gradient
            bwd(18, Reduction, 15), // gamma gradient
            bwd(19, Reduction, 15), // beta gradient
            bwd(20, Dropout, 13),
            // Backward, feed-forward block.
            bwd(21, Gemm, 11),      // contraction input gradient
            bwd(22, Gemm, 11),      // contraction weight gradient
            bwd(23, Reduction, 12), // contraction bias gradient
            bwd(24, Gelu, 10),      // GeLU derivative
            bwd(25, Gelu, 10),      // derivative applied to the gradient
            bwd(26, Gemm, 8),       // expansion weight gradient
            bwd(27, Reduction, 9),  // expansion bias gradient
            bwd(28, Gemm, 8),       // expansion input gradient
            bwd(29, ResidualGradAdd, 14),
            // Backward, first layernorm block.
            bwd(30, Reduction, 7),
            bwd(31, LayerNorm, 7),
            bwd(32, Reduction, 7),
            bwd(33, Reduction, 7),
            bwd(34, Dropout, 5),
            // Backward, attention block.
            bwd(35, Gemm, 3),      // output-projection input gradient
            bwd(36, Gemm, 3),      // output-projection weight gradient
            bwd(37, Reduction, 4), // output-projection bias gradient
            bwd(38, Attention, 2),
            bwd(39, Gemm, 0),      // QKV weight gradient
            bwd(40, Reduction, 1), // QKV bias gradient
            bwd(41, Gemm, 0),      // QKV input gradient
            bwd(42, ResidualGradAdd, 6),
        ];
        let edges = vec![
            // Forward chain plus the in-graph residual skip.
            (0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7),
            (7, 8), (8, 9), (9, 10), (10, 11), (11, 12), (12, 13),
            (13, 14), (7, 14), (14, 15),
            // Gradient flow, second layernorm block.
            (16, 17), (16, 18), (16, 19), (17, 20),
            // Feed-forward gradients.
            (20, 21), (20, 22), (20, 23),
            (21, 24), (24, 25), (25, 26), (25, 27), (25, 28),
            (28, 29), (17, 29),
            // First layernorm block.
            (29, 30), (29, 31), (30, 31), (30, 32), (30, 33), (31, 34),
            // Attention gradients.
            (34, 35), (34, 36), (34, 37), (35, 38),
            (38, 39), (38, 40), (38, 41),
            (41, 42), (31, 42),
        ];
        Self::new(nodes, edges).expect("the committed encoder graph is well formed")
    }
}

/// The four fusion rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RuleName {
    Linear,
    #[serde(rename = "Linear_GeLU_Linear")]
    LinearGeluLinear,
    #[serde(rename = "Dropout_Add_LayerNorm")]
    DropoutAddLayerNorm,
    ResidualGrad,
}

impl RuleName {
    pub const ALL: [RuleName; 4] = [
        RuleName::Linear,
        RuleName::LinearGeluLinear,
        RuleName::DropoutAddLayerNorm,
        RuleName::ResidualGrad,
    ];
}

impl std::fmt::Display for RuleName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RuleName::Linear => "Linear",
            RuleName::LinearGeluLinear => "Linear_GeLU_Linear",
            RuleName::DropoutAddLayerNorm => "Dropout_Add_LayerNorm",
            RuleName::ResidualGrad => "ResidualGrad",
        })
    }
}

/// One fusion rule: the kernel runs it matches in each phase, and how
/// many launches the fused replacement costs. An empty pattern means
/// the rule has nothing to match in that phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionRule {
    pub name: RuleName,
    pub forward_pattern: Vec<NodeKind>,
    pub fused_forward: usize,
    pub backward_pattern: Vec<NodeKind>,
    pub fused_backward: usize,
}

impl FusionRule {
    fn validate(&self) -> Result<(), FusionError> {
        for (pattern, fused, phase) in [
            (&self.forward_pattern, self.fused_forward, Phase::Forward),
            (&self.backward_pattern, self.fused_backward, Phase::Backward),
        ] {
            if pattern.is_empty() != (fused == 0) {
                return Err(FusionError::InvalidRule {
                    reason: format!(
                        "{}: {phase} pattern of {} kernels fuses to {fused}",
                        self.name,
                        pattern.len()
                    ),
                });
            }
            if fused > pattern.len() {
                return Err(FusionError::InvalidRule {
                    reason: format!(
                        "{}: {phase} fused count {fused} exceeds pattern length {}",
                        self.name,
                        pattern.len()
                    ),
                });
            }
        }
        if self.forward_pattern.is_empty() && self.backward_pattern.is_empty() {
            return Err(FusionError::InvalidRule {
                reason: format!("{}: rule matches nothing", self.name),
            });
        }
        Ok(())
    }

    pub fn unfused_total(&self) -> usize {
        self.forward_pattern.len() + self.backward_pattern.len()
    }

    pub fn fused_total(&self) -> usize {
        self.fused_forward + self.fused_backward
    }
}

/// The shipped rule set, in priority order: the longer
/// linear-GeLU-linear pattern precedes bare Linear so a prefix match
/// can never eat half of the fused block (greedy matching also prefers
/// the longer match outright).
pub fn standard_rules() -> Vec<FusionRule> {
    use NodeKind::*;
    vec![
        FusionRule {
            name: RuleName::LinearGeluLinear,
            forward_pattern: vec![Gemm, BiasAdd, Gelu, Gemm, BiasAdd],
            fused_forward: 2,
            backward_pattern: vec![Gemm, Gemm, Reduction, Gelu, Gelu, Gemm, Reduction],
            fused_backward: 4,
        },
        FusionRule {
            name: RuleName::Linear,
            forward_pattern: vec![Gemm, BiasAdd],
            fused_forward: 1,
            backward_pattern: vec![Gemm, Gemm, Reduction],
            fused_backward: 2,
        },
        FusionRule {
            name: RuleName::DropoutAddLayerNorm,
            forward_pattern: vec![Dropout, Add, LayerNorm],
            fused_forward: 1,
            backward_pattern: vec![Reduction, LayerNorm, Reduction, Reduction, Dropout],
            fused_backward: 2,
        },
        FusionRule {
            name: RuleName::ResidualGrad,
            forward_pattern: vec![],
            fused_forward: 0,
            backward_pattern: vec![Gemm, ResidualGradAdd],
            fused_backward: 1,
        },
    ]
}

/// Launch counts split by phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KernelCounts {
    pub forward: usize,
    pub backward: usize,
    pub total: usize,
}

/// One rule's report row: the per-instance unfused and fused launch
/// counts (the pattern's own cost, phase by phase) and how many times
/// each phase's pattern matched in the graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PatternRow {
    pub rule: RuleName,
    pub unfused: KernelCounts,
    pub fused: KernelCounts,
    pub forward_matches: usize,
    pub backward_matches: usize,
}

/// Full accounting for one graph under one rule set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FusionReport {
    pub rows: Vec<PatternRow>,
    /// Launch counts with every rule disabled: one per node.
    pub unfused: KernelCounts,
    /// Launch counts with the given rules applied.
    pub fused: KernelCounts,
    pub stray_forward: usize,
    pub stray_backward: usize,
}

struct PhaseOutcome {
    fused_kernels: usize,
    strays: usize,
    matches_per_rule: Vec<usize>,
}

/// Greedy leftmost-longest scan of one phase's kind sequence.
/// `patterns` holds (rule position, pattern, fused cost) for rules
/// active in this phase.
fn match_sequence(
    kinds: &[NodeKind],
    patterns: &[(usize, &[NodeKind], usize)],
    num_rules: usize,
    phase: Phase,
    rule_names: &[RuleName],
) -> Result<PhaseOutcome, FusionError> {
    let mut outcome = PhaseOutcome {
        fused_kernels: 0,
        strays: 0,
        matches_per_rule: vec![0; num_rules],
    };
    let mut i = 0;
    while i < kinds.len() {
        let mut best: Option<(usize, usize, usize)> = None;
        let mut tied_with: Option<usize> = None;
        for &(rule_pos, pattern, fused) in patterns {
            if kinds[i..].starts_with(pattern) {
                match best {
                    Some((len, pos, _)) if pattern.len() == len => {
                        if rule_names[pos] != rule_names[rule_pos] {
                            tied_with = Some(rule_pos);
                        }
                    }
                    Some((len, _, _)) if pattern.len() < len => {}
                    _ => {
                        best = Some((pattern.len(), rule_pos, fused));
                        tied_with = None;
                    }
                }
            }
        }
        if let (Some((len, pos, _)), Some(other)) = (best, tied_with) {
            return Err(FusionError::AmbiguousMatch {
                phase,
                position: i,
                len,
                first: rule_names[pos],
                second: rule_names[other],
            });
        }
        match best {
            Some((len, rule_pos, fused)) => {
                outcome.fused_kernels += fused;
                outcome.matches_per_rule[rule_pos] += 1;
                i += len;
            }
            None => {
                outcome.fused_kernels += 1;
                outcome.strays += 1;
                i += 1;
            }
        }
    }
    Ok(outcome)
}

/// Counts kernel launches for the graph under the given rules, per
/// pattern and overall. An empty rule slice reports the unfused
/// baseline in both columns.
pub fn count_kernels(graph: &OpGraph, rules: &[FusionRule]) -> Result<FusionReport, FusionError> {
    for (i, rule) in rules.iter().enumerate() {
        rule.validate()?;
        if rules[..i].iter().any(|r| r.name == rule.name) {
            return Err(FusionError::InvalidRule {
                reason: format!("{} appears twice", rule.name),
            });
        }
    }
    let rule_names: Vec<RuleName> = rules.iter().map(|r| r.name).collect();

    let mut outcomes = Vec::with_capacity(2);
    for phase in [Phase::Forward, Phase::Backward] {
        let kinds = graph.phase_kinds(phase);
        let patterns: Vec<(usize, &[NodeKind], usize)> = rules
            .iter()
            .enumerate()
            .filter_map(|(pos, rule)| {
                let (pattern, fused) = match phase {
                    Phase::Forward => (&rule.forward_pattern, rule.fused_forward),
                    Phase::Backward => (&rule.backward_pattern, rule.fused_backward),
                };
                (!pattern.is_empty()).then_some((pos, pattern.as_slice(), fused))
            })
            .collect();
        outcomes.push(match_sequence(
            &kinds,
            &patterns,
            rules.len(),
            phase,
            &rule_names,
        )?);
    }
    let (fwd, bwd) = (&outcomes[0], &outcomes[1]);

    let rows = rules
        .iter()
        .enumerate()
        .map(|(pos, rule)| PatternRow {
            rule: rule.name,
            unfused: KernelCounts {
                forward: rule.forward_pattern.len(),
                backward: rule.backward_pattern.len(),
                total: rule.unfused_total(),
            },
            fused: KernelCounts {
                forward: rule.fused_forward,
                backward: rule.fused_backward,
                total: rule.fused_total(),
            },
            forward_matches: fwd.matches_per_rule[pos],
            backward_matches: bwd.matches_per_rule[pos],
        })
        .collect();

    let unfused_forward = graph.phase_len(Phase::Forward);
    let unfused_backward = graph.phase_len(Phase::Backward);
    Ok(FusionReport {
        rows,
        unfused: KernelCounts {
            forward: unfused_forward,
            backward: unfused_backward,
            total: unfused_forward + unfused_backward,
        },
        fused: KernelCounts {
            forward: fwd.fused_kernels,
            backward: bwd.fused_kernels,
            total: fwd.fused_kernels + bwd.fused_kernels,
        },
        stray_forward: fwd.strays,
        stray_backward: bwd.strays,
    })
}
