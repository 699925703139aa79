#pragma once

// Deterministic synthetic text for training smoke tests: simple subject-
// verb-object sentences over a tiny vocabulary, repeated with a seeded
// shuffle. Self-generated, so the suites carry no external data.

#include <random>
#include <string>
#include <vector>

namespace toy_corpus {

inline std::string make(std::size_t approx_bytes, unsigned seed = 1) {
    const std::vector<std::string> subjects = {"the cat", "a dog",  "the bird", "a fox",
                                               "the owl", "a fish", "the mouse"};
    const std::vector<std::string> verbs = {"sees", "likes", "finds", "follows", "watches"};
    const std::vector<std::string> objects = {"the moon", "a tree",   "the river", "a stone",
                                              "the sun",  "a flower", "the hill"};
    std::mt19937 rng(seed);
    std::uniform_int_distribution<std::size_t> s(0, subjects.size() - 1);
    std::uniform_int_distribution<std::size_t> v(0, verbs.size() - 1);
    std::uniform_int_distribution<std::size_t> o(0, objects.size() - 1);
    std::string out;
    out.reserve(approx_bytes + 64);
    while (out.size() < approx_bytes)
        out += subjects[s(rng)] + " " + verbs[v(rng)] + " " + objects[o(rng)] + ". ";
    return out;
}

// ten fixed sentences repeated verbatim, for fast-overfit smoke runs
inline std::string repeated_sentences(std::size_t repeats) {
    const std::string block =
        "the cat sees the moon. a dog likes a tree. the bird finds the river. "
        "a fox follows a stone. the owl watches the sun. a fish sees a flower. "
        "the mouse likes the hill. the cat finds a tree. a dog watches the moon. "
        "the bird follows the sun. ";
    std::string out;
    out.reserve(block.size() * repeats);
    for (std::size_t i = 0; i < repeats; ++i) out += block;
    return out;
}

}  // namespace toy_corpus
