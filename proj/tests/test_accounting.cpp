#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "lorarank/accounting.hpp"

using namespace lorarank;

namespace {

const char* kDescriptorPath = LORARANK_DATA_DIR "/llama32-11b-vision.json";

ArchitectureDescriptor two_module_descriptor() {
    ArchitectureDescriptor desc;
    desc.model_name = "toy";
    desc.total_params = 1000000;
    desc.modules = {
        {"a.q", 128, 128, "language-self", "Q"},
        {"a.up", 128, 512, "language-self", "U"},
    };
    return desc;
}

}  // namespace

TEST_CASE("single module count is r times the dim sum") {
    ArchitectureDescriptor desc;
    desc.model_name = "one";
    desc.total_params = 1;
    desc.modules = {{"m.q", 4096, 4096, "language-self", "Q"}};
    CountReport report = lora_param_count(desc, 64);
    CHECK(report.total == 524288);
    CHECK(report.per_module.size() == 1);
    CHECK(report.per_group.at("Q") == 524288);

    desc.modules = {{"m.q", 2, 3, "language-self", "Q"}};
    CHECK(lora_param_count(desc, 1).total == 5);
    CHECK_THROWS_AS(lora_param_count(desc, 0), ValueError);
}

TEST_CASE("shipped descriptor reproduces the published uniform-rank counts") {
    ArchitectureDescriptor desc = load_descriptor(kDescriptorPath);
    CHECK(desc.modules.size() == 520);

    // Modules exist in all four towers.
    std::map<std::string, int> towers;
    for (const auto& m : desc.modules) towers[m.tower]++;
    CHECK(towers.at("vision-local") > 0);
    CHECK(towers.at("vision-global") > 0);
    CHECK(towers.at("language-self") > 0);
    CHECK(towers.at("language-cross") > 0);

    const CountReport all = lora_param_count(desc, 64);
    const CountReport gud = lora_param_count(desc, 64, normalize_groups({"g", "u", "d"}));
    const CountReport qk = lora_param_count(desc, 64, normalize_groups({"q", "k"}));

    CHECK(std::abs(double(all.total) - 268.7e6) / 268.7e6 < 0.02);
    CHECK(std::abs(double(gud.total) - 141.6e6) / 141.6e6 < 0.02);
    CHECK(std::abs(double(qk.total) - 47.2e6) / 47.2e6 < 0.02);

    CHECK(format_millions(all.total) == "268.7M");
    CHECK(format_millions(gud.total) == "141.6M");
    CHECK(format_millions(qk.total) == "47.2M");
    CHECK(format_percent(all.fraction) == "2.5%");
    CHECK(format_percent(gud.fraction) == "1.3%");
    CHECK(format_percent(qk.fraction) == "0.4%");
}

TEST_CASE("compression ratio display") {
    CHECK(format_ratio(compression_ratio(268700000ull, 103300000ull)) == "2.6");
    ArchitectureDescriptor desc = two_module_descriptor();
    CountReport a = lora_param_count(desc, 8);
    CHECK(format_ratio(compression_ratio(a, a)) == "1.0");

    // Halving every rank exactly halves the count, so the ratio is 2.0.
    CountReport half = lora_param_count(desc, 4);
    CHECK(compression_ratio(a, half) == 2.0);

    CHECK_THROWS_AS(compression_ratio(100, 0), ValueError);
}

TEST_CASE("rank maps drive per-module counts and missing modules are named") {
    ArchitectureDescriptor desc = two_module_descriptor();
    RankMap map;
    map.add({"a.q", 8, {}, {}});
    map.add({"a.up", 4, {}, {}});
    CountReport report = lora_param_count(desc, map);
    CHECK(report.total == 8 * 256 + 4 * 640);

    RankMap incomplete;
    incomplete.add({"a.q", 8, {}, {}});
    CHECK_THROWS_MATCHES(lora_param_count(desc, incomplete), ValueError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("a.up")));

    // Group-filtered counting only requires ranks for filtered modules.
    CHECK(lora_param_count(desc, incomplete, normalize_groups({"q"})).total == 8 * 256);
}

TEST_CASE("count properties: linearity, monotonicity, additivity") {
    ArchitectureDescriptor desc = load_descriptor(kDescriptorPath);

    const CountReport r8 = lora_param_count(desc, 8);
    const CountReport r16 = lora_param_count(desc, 16);
    CHECK(r16.total == 2 * r8.total);  // linearity in r

    RankMap low, high;
    int i = 0;
    for (const auto& m : desc.modules) {
        const std::size_t base = (i++ % 2 == 0) ? 4 : 8;
        low.add({m.name, base, {}, {}});
        high.add({m.name, base * 2, {}, {}});
    }
    const CountReport rl = lora_param_count(desc, low);
    const CountReport rh = lora_param_count(desc, high);
    CHECK(rh.total >= rl.total);
    for (const auto& [group, count] : rl.per_group) CHECK(rh.per_group.at(group) >= count);

    // Disjoint group additivity.
    const CountReport qk = lora_param_count(desc, 64, normalize_groups({"q", "k"}));
    const CountReport vo = lora_param_count(desc, 64, normalize_groups({"v", "o"}));
    const CountReport qkvo = lora_param_count(desc, 64, normalize_groups({"q", "k", "v", "o"}));
    CHECK(qk.total + vo.total == qkvo.total);
}

TEST_CASE("descriptor validation names the offending field") {
    ArchitectureDescriptor desc = two_module_descriptor();
    desc.modules.push_back(desc.modules.front());  // duplicate name
    CHECK_THROWS_MATCHES(desc.validate(), ValueError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("a.q")));

    ArchitectureDescriptor empty;
    empty.model_name = "x";
    empty.total_params = 10;
    CHECK_THROWS_AS(empty.validate(), ValueError);

    ArchitectureDescriptor badtower = two_module_descriptor();
    badtower.modules[0].tower = "vision";
    CHECK_THROWS_AS(badtower.validate(), ValueError);

    ArchitectureDescriptor baddim = two_module_descriptor();
    baddim.modules[1].out_dim = 0;
    CHECK_THROWS_MATCHES(baddim.validate(), ValueError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("a.up")));

    CHECK_THROWS_AS(normalize_groups({"x"}), ValueError);
}

TEST_CASE("descriptor loading rejects malformed files") {
    CHECK_THROWS_AS(load_descriptor("missing.json"), IoError);

    const std::string bad_json = "lorarank_test_bad.json";
    {
        std::ofstream out(bad_json);
        out << "{ not json";
    }
    CHECK_THROWS_AS(load_descriptor(bad_json), ValueError);
    std::remove(bad_json.c_str());

    const std::string bad_schema = "lorarank_test_schema.json";
    {
        std::ofstream out(bad_schema);
        out << R"({"schema_version": 9, "model_name": "x", "total_params": 5, "modules": []})";
    }
    CHECK_THROWS_MATCHES(load_descriptor(bad_schema), ValueError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("schema_version")));
    std::remove(bad_schema.c_str());
}
