#pragma once

#include "cipherbench/assembler.hpp"
#include "cipherbench/interpreter.hpp"

#include <string>
#include <vector>

namespace cb::test {

std::string corpus_dir();
std::string read_text_file(const std::string& path);
Program load_corpus(const std::string& name); // assembles corpus/<name>.asm
std::vector<std::string> corpus_targets();    // every target used in campaigns

// Canonical single-limb cswap body used by several suites; reads the decision
// bit from r0 and swaps the two 8-byte limbs at `p` and `q`.
std::string cswap_snippet(u64 p, u64 q);

ExecResult run_asm(const std::string& src, std::vector<Bytes> inputs = {},
                   u64 fuel = 1'000'000, u64 os_seed = 1);

} // namespace cb::test
