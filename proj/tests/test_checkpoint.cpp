#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "mflow/checkpoint.hpp"

using mflow::Checkpoint;
using mflow::CheckpointError;
using mflow::FlowModel;
using mflow::FlowStack;
using mflow::LatentSplit;
using mflow::LayerSpec;
using mflow::OptimState;

namespace {

FlowModel sample_model() {
    FlowModel m;
    m.f = FlowStack({LayerSpec::actnorm(3), LayerSpec::invertible_linear(3),
                     LayerSpec::affine_coupling(3, {5}, 1)},
                    101);
    m.f.set_permutation(1, {2, 0, 1});
    m.h = FlowStack({LayerSpec::actnorm(2), LayerSpec::invertible_linear(2)},
                    102);
    m.split = LatentSplit{3, 2};
    mflow::Rng rng(103);
    for (double& p : m.f.params()) p += 0.3 * rng.next_normal();
    for (double& p : m.h->params()) p += 0.3 * rng.next_normal();
    return m;
}

// Re-sign a checkpoint body after an edit so only the edited aspect is under
// test, not the checksum.
std::string resign(std::string body) {
    const std::size_t pos = body.rfind("checksum ");
    if (pos != std::string::npos) body.erase(pos);
    return body + "checksum " + mflow::detail::fnv1a_hex(body) + "\n";
}

std::string replace_once(std::string text, const std::string& from,
                         const std::string& to) {
    const std::size_t pos = text.find(from);
    REQUIRE(pos != std::string::npos);
    return text.replace(pos, from.size(), to);
}

struct TempFile {
    std::string path;
    TempFile() {
        path = (std::filesystem::temp_directory_path() /
                ("mflow_ckpt_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter++)))
                   .string();
    }
    ~TempFile() { std::remove(path.c_str()); }
    static inline int counter = 0;
};

}  // namespace

TEST_CASE("checkpoint round trip is exact") {
    FlowModel m = sample_model();
    OptimState opt;
    opt.step = 12;
    opt.m.assign(m.f.param_count() + m.h->param_count(), 0.0);
    opt.v = opt.m;
    mflow::Rng rng(104);
    for (double& x : opt.m) x = rng.next_normal();
    for (double& x : opt.v) x = std::abs(rng.next_normal());
    std::vector<std::string> echo = {"data = circle:n=64", "d = 2",
                                     "# trailing comment survives"};

    const std::string bytes = mflow::serialize_checkpoint(m, echo, &opt);
    Checkpoint ck = mflow::parse_checkpoint(bytes);

    REQUIRE(ck.model.split.ambient_dim == 3);
    REQUIRE(ck.model.split.manifold_dim == 2);
    REQUIRE(ck.model.f.params() == m.f.params());
    REQUIRE(ck.model.h.has_value());
    REQUIRE(ck.model.h->params() == m.h->params());
    REQUIRE(ck.model.f.layers()[1].perm == std::vector<int>{2, 0, 1});
    REQUIRE(ck.model.f.layers()[2].spec.hidden == std::vector<int>{5});
    REQUIRE(ck.model.f.layers()[2].spec.mask_parity == 1);
    REQUIRE(ck.config_echo == echo);
    REQUIRE(ck.opt.has_value());
    REQUIRE(ck.opt->step == 12);
    REQUIRE(ck.opt->m == opt.m);
    REQUIRE(ck.opt->v == opt.v);

    // the parsed model behaves like the original
    std::vector<double> x = {0.4, -1.1, 0.2};
    auto [z1, ld1] = m.f.forward(x);
    auto [z2, ld2] = ck.model.f.forward(x);
    REQUIRE(z1 == z2);
    REQUIRE(ld1 == ld2);

    // serialize(parse(bytes)) reproduces the bytes
    const mflow::OptimState* po = &*ck.opt;
    REQUIRE(mflow::serialize_checkpoint(ck.model, ck.config_echo, po) ==
            bytes);
}

TEST_CASE("single block checkpoint omits the manifold flow") {
    FlowModel m = sample_model();
    m.h.reset();
    const std::string bytes = mflow::serialize_checkpoint(m);
    REQUIRE(bytes.find("h_present 0") != std::string::npos);
    REQUIRE(bytes.find("optstate 0") != std::string::npos);
    Checkpoint ck = mflow::parse_checkpoint(bytes);
    REQUIRE_FALSE(ck.model.h.has_value());
    REQUIRE_FALSE(ck.opt.has_value());
    REQUIRE(ck.model.f.params() == m.f.params());
}

TEST_CASE("wrong version line is rejected as such") {
    FlowModel m = sample_model();
    std::string bytes = mflow::serialize_checkpoint(m);
    bytes = resign(replace_once(bytes, "MFLOW-CKPT v1", "MFLOW-CKPT v2"));
    try {
        mflow::parse_checkpoint(bytes);
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        REQUIRE(e.kind == CheckpointError::Kind::Version);
    }
}

TEST_CASE("corrupted bytes fail the checksum before anything else") {
    FlowModel m = sample_model();
    std::string bytes = mflow::serialize_checkpoint(m);
    // flip one digit inside a parameter line, keep the stale checksum
    const std::size_t pos = bytes.find("params ");
    REQUIRE(pos != std::string::npos);
    std::size_t digit = bytes.find('7', pos);
    REQUIRE(digit != std::string::npos);
    bytes[digit] = '8';
    try {
        mflow::parse_checkpoint(bytes);
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        REQUIRE(e.kind == CheckpointError::Kind::Checksum);
    }
}

TEST_CASE("missing or short content reads as truncated") {
    FlowModel m = sample_model();
    const std::string bytes = mflow::serialize_checkpoint(m);

    SECTION("no checksum line at all") {
        std::string cut = bytes.substr(0, bytes.rfind("checksum "));
        try {
            mflow::parse_checkpoint(cut);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::Truncated);
        }
    }
    SECTION("empty input") {
        try {
            mflow::parse_checkpoint("");
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::Truncated);
        }
    }
    SECTION("body ends early even with a fresh checksum") {
        // keep the honest param count but only a few of the value lines,
        // then re-sign: the checksum is fine but the reader runs out
        std::size_t pos = bytes.find('\n', bytes.find("params "));
        for (int i = 0; i < 3; ++i) pos = bytes.find('\n', pos + 1);
        std::string cut = resign(bytes.substr(0, pos + 1));
        try {
            mflow::parse_checkpoint(cut);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::Truncated);
        }
    }
}

TEST_CASE("structural lies are malformed") {
    FlowModel m = sample_model();
    const std::string bytes = mflow::serialize_checkpoint(m);

    SECTION("param count disagrees with the topology") {
        // add a bogus extra parameter line and bump the count
        const std::size_t nf = m.f.param_count() + m.h->param_count();
        std::string doctored = replace_once(
            bytes, "params " + std::to_string(nf),
            "params " + std::to_string(nf + 1));
        const std::size_t after = doctored.find('\n', doctored.find("params "));
        doctored.insert(after + 1, "0.5\n");
        doctored = resign(doctored);
        try {
            mflow::parse_checkpoint(doctored);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::Malformed);
        }
    }
    SECTION("variant contradicts the stored flows") {
        std::string doctored = resign(
            replace_once(bytes, "variant two_block", "variant single_block"));
        try {
            mflow::parse_checkpoint(doctored);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::Malformed);
        }
    }
    SECTION("garbage where a number belongs") {
        std::string doctored =
            resign(replace_once(bytes, "ambient_dim 3", "ambient_dim three"));
        try {
            mflow::parse_checkpoint(doctored);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::Malformed);
        }
    }
}

TEST_CASE("checkpoint file save and load") {
    FlowModel m = sample_model();
    TempFile f;
    mflow::save_checkpoint(m, f.path, {"seed = 9"});
    REQUIRE_FALSE(std::filesystem::exists(f.path + ".tmp"));
    Checkpoint ck = mflow::load_checkpoint(f.path);
    REQUIRE(ck.model.f.params() == m.f.params());
    REQUIRE(ck.config_echo == std::vector<std::string>{"seed = 9"});
    REQUIRE_THROWS_WITH(mflow::load_checkpoint("/nonexistent/nope.ckpt"),
                        Catch::Matchers::ContainsSubstring("cannot open"));
}
