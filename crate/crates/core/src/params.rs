//! Named parameter and buffer registry shared by every layer.

use std::fmt;

use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Conv,
    BatchNorm,
    Attention,
    Classifier,
}

impl ParamRole {
    pub const ALL: [ParamRole; 4] = [ParamRole::Conv, ParamRole::BatchNorm, ParamRole::Attention, ParamRole::Classifier];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Conv => "conv",
            ParamRole::BatchNorm => "bn",
            ParamRole::Attention => "attention",
            ParamRole::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Option<ParamRole> {
        ParamRole::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for ParamRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        self.params.push(Parameter { name: name.into(), role, value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Option<Tensor>) -> BufferId {
        self.buffers.push(Buffer { name: name.into(), value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> Option<&Tensor> {
        self.buffers[id.0].value.as_ref()
    }

    pub fn set_buffer(&mut self, id: BufferId, value: Tensor) {
        self.buffers[id.0].value = Some(value);
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_role(&self, role: ParamRole) -> usize {
        self.params.iter().filter(|p| p.role == role).map(|p| p.value.len()).sum()
    }

    /// Place every parameter on `graph` as a leaf; `trainable` decides
    /// whether gradients are tracked.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| graph.leaf(p.value.clone(), trainable)).collect()
    }
}

/// One forward pass: the tape, the parameters bound onto it and mutable
/// access to buffers for running-statistic updates.
pub struct Session<'a> {
    pub graph: Graph,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    vars: Vec<Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode, trainable: bool) -> Self {
        Self::with_graph(Graph::new(), store, mode, trainable)
    }

    /// Continue on an existing tape, e.g. one that already holds inputs.
    pub fn with_graph(mut graph: Graph, store: &'a mut ParamStore, mode: Mode, trainable: bool) -> Self {
        let vars = store.bind(&mut graph, trainable);
        Session { graph, store, mode, vars }
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient of every parameter after backward, in store order.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| self.graph.grad(v)).collect()
    }
}
