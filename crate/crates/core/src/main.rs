fn main() {
    // CLI filled in alongside the pipeline module.
}
