#include "corpus.hpp"

#include <fstream>

namespace cb::test {

std::string corpus_dir() {
#ifdef CIPHERBENCH_CORPUS_DIR
    return CIPHERBENCH_CORPUS_DIR;
#else
    return "corpus";
#endif
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path);
    if (!f)
        fail("cannot open ", path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

Program load_corpus(const std::string& name) {
    return assemble(read_text_file(corpus_dir() + "/" + name + ".asm"));
}

std::vector<std::string> corpus_targets() {
    return {"cswap", "bytefill", "ladder", "memcpyish", "copyloop",
            "stackframes", "heapmix", "smallwrites", "publiconly"};
}

std::string cswap_snippet(u64 p, u64 q) {
    return strf("    mov r1, ", p, "\n",
                "    mov r2, ", q, "\n",
                "    load r3, q[r1+0]\n"
                "    load r4, q[r2+0]\n"
                "    mov r5, 0\n"
                "    sub r5, r0\n" // mask = 0 - b
                "    mov r6, r3\n"
                "    xor r6, r4\n"
                "    and r6, r5\n" // tmp = (p ^ q) & mask
                "    xor r3, r6\n"
                "    xor r4, r6\n"
                "    store q[r1+0], r3\n"
                "    store q[r2+0], r4\n");
}

ExecResult run_asm(const std::string& src, std::vector<Bytes> inputs, u64 fuel, u64 os_seed) {
    Program p = assemble(src);
    ExecOptions opts;
    opts.inputs = std::move(inputs);
    opts.fuel = fuel;
    opts.os_seed = os_seed;
    return execute(p, opts);
}

} // namespace cb::test
