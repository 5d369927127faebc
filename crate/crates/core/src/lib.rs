pub mod tinynn;
pub mod workload;
pub mod profiler;
pub mod regress;
pub mod federated;
pub mod offloadsim;
