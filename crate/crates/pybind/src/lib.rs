//! Python bindings. Placeholder until the core API lands.
