//! Criterion benchmarks for the solver, adjoint, Jacobian and sampler; see `benches/`.
