fn main() {
    newsbench::cli::main();
}
