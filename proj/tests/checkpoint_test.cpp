// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "cmstew/checkpoint.hpp"

using namespace cmstew;
namespace fs = std::filesystem;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.input_dim = 3;
  c.gru_layers = 1;
  c.latent_dim = 8;
  c.transformer_layers = 1;
  c.heads = 2;
  c.ffn_hidden = 6;
  c.classifier_hidden = 5;
  return c;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("cmstew_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("checkpoint round-trips bit-exactly") {
  TempDir tmp;
  SourceModelT<float> model(Task::classification, small_config(), 42);
  const std::string path = tmp.file("model.ckpt");
  save_checkpoint(path, Task::classification, small_config(), model.parameters());

  Checkpoint ckpt = load_checkpoint(path);
  CHECK(ckpt.task == Task::classification);
  CHECK(ckpt.enc.input_dim == 3);
  CHECK(ckpt.enc.gru_hidden == 0);
  CHECK(ckpt.enc.latent_dim == 8);

  auto params = model.parameters();
  REQUIRE(ckpt.entries.size() == params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(ckpt.entries[i].name == params[i]->name);  // storage order is parameter order
    REQUIRE(ckpt.entries[i].shape == params[i]->value.shape());
    CHECK(std::memcmp(ckpt.entries[i].data.data(), params[i]->value.data(),
                      ckpt.entries[i].data.size() * sizeof(float)) == 0);
  }

  // Binding into a differently-seeded model reproduces every value.
  SourceModelT<float> other(Task::classification, small_config(), 7);
  bind_checkpoint(ckpt, other.parameters(), false);
  auto other_params = other.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(std::memcmp(other_params[i]->value.data(), params[i]->value.data(),
                      static_cast<std::size_t>(params[i]->value.size()) * sizeof(float)) == 0);
  }

  // Byte-identical re-save.
  const std::string path2 = tmp.file("model2.ckpt");
  save_checkpoint(path2, Task::classification, small_config(), other.parameters());
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("weak checkpoint binds to an encoder-classifier model") {
  TempDir tmp;
  DecoderConfig dc;
  dc.gru_hidden = 4;
  dc.output_dim = 6;
  WeakModelT<float> weak(Task::regression, small_config(), dc, 11);
  const std::string path = tmp.file("weak.ckpt");
  save_checkpoint(path, Task::regression, small_config(), weak.parameters());

  Checkpoint ckpt = load_checkpoint(path);
  CHECK(ckpt.find("dec.out.w") != nullptr);

  // Evaluation builds the model without the decoder; stored decoder
  // parameters are ignored, everything else must match.
  WeakModelT<float> eval_model(Task::regression, small_config(), 99);
  CHECK_FALSE(eval_model.has_decoder());
  bind_checkpoint(ckpt, eval_model.parameters(), true);
  auto want = weak.parameters();
  for (auto* p : eval_model.parameters()) {
    const CheckpointEntry* e = ckpt.find(p->name);
    REQUIRE(e != nullptr);
    CHECK(std::memcmp(p->value.data(), e->data.data(),
                      e->data.size() * sizeof(float)) == 0);
  }
  // Strict binding refuses the leftovers.
  CHECK_THROWS_WITH_AS(bind_checkpoint(ckpt, eval_model.parameters(), false),
                       doctest::Contains("no matching"), IoError);
}

TEST_CASE("decoder parameters sit after the shared prefix") {
  DecoderConfig dc;
  dc.gru_hidden = 4;
  dc.output_dim = 6;
  WeakModelT<float> weak(Task::classification, small_config(), dc, 5);
  SourceModelT<float> source(Task::classification, small_config(), 5);
  auto wp = weak.parameters();
  auto sp = source.parameters();
  REQUIRE(wp.size() > sp.size());
  for (std::size_t i = 0; i < sp.size(); ++i) CHECK(wp[i]->name == sp[i]->name);
  for (std::size_t i = sp.size(); i < wp.size(); ++i)
    CHECK(wp[i]->name.substr(0, 4) == "dec.");

  // Same seed gives bitwise-identical shared parameters: the per-name
  // init streams cannot be shifted by the decoder's presence.
  for (std::size_t i = 0; i < sp.size(); ++i) {
    CHECK(std::memcmp(wp[i]->value.data(), sp[i]->value.data(),
                      static_cast<std::size_t>(sp[i]->value.size()) * sizeof(float)) == 0);
  }
}

TEST_CASE("checkpoint rejects corruption") {
  TempDir tmp;
  SourceModelT<float> model(Task::classification, small_config(), 1);
  const std::string path = tmp.file("m.ckpt");
  save_checkpoint(path, Task::classification, small_config(), model.parameters());
  const std::string good = slurp(path);

  SUBCASE("flipped payload byte") {
    std::string bad = good;
    bad[bad.size() - 100] = static_cast<char>(bad[bad.size() - 100] ^ 0x40);
    spit(path, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("checksum"), IoError);
  }
  SUBCASE("truncated file") {
    spit(path, good.substr(0, good.size() - 9));
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"), IoError);
  }
  SUBCASE("trailing bytes") {
    spit(path, good + "x");
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("trailing"), IoError);
  }
  SUBCASE("wrong magic") {
    std::string bad = good;
    bad[0] = 'X';
    spit(path, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("format"), IoError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(tmp.file("nope.ckpt")), IoError);
  }
}

TEST_CASE("binding validates names and shapes") {
  TempDir tmp;
  SourceModelT<float> model(Task::classification, small_config(), 1);
  const std::string path = tmp.file("m.ckpt");
  save_checkpoint(path, Task::classification, small_config(), model.parameters());
  Checkpoint ckpt = load_checkpoint(path);

  ParameterT<float> unknown("mystery.w", Tensor({2, 2}));
  CHECK_THROWS_WITH_AS(bind_checkpoint(ckpt, {&unknown}, true),
                       doctest::Contains("missing parameter"), IoError);

  EncoderConfig wider = small_config();
  wider.latent_dim = 10;
  SourceModelT<float> mismatched(Task::classification, wider, 1);
  CHECK_THROWS_WITH_AS(bind_checkpoint(ckpt, mismatched.parameters(), true),
                       doctest::Contains("shape mismatch"), IoError);
}

TEST_CASE("parameter count follows the closed form") {
  EncoderConfig c = small_config();
  SourceModelT<float> model(Task::classification, c, 3);
  const int h = c.effective_gru_hidden();
  std::int64_t want = 2LL * c.input_dim;  // norm mean + std
  // One GRU direction: 3 input mats, 3 recurrent mats, 4 biases.
  auto gru_dir = [](std::int64_t in, std::int64_t hid) {
    return 3 * in * hid + 3 * hid * hid + 4 * hid;
  };
  std::int64_t in = c.input_dim;
  for (int l = 0; l < c.gru_layers; ++l) {
    want += 2 * gru_dir(in, h);
    in = 2LL * h;
  }
  want += 2LL * h * c.latent_dim + c.latent_dim;  // projection
  const std::int64_t dk = c.latent_dim / c.heads;
  want += c.transformer_layers *
          (c.heads * 3LL * c.latent_dim * dk + static_cast<std::int64_t>(c.heads) * dk * c.latent_dim +
           (static_cast<std::int64_t>(c.latent_dim) * c.ffn_hidden + c.ffn_hidden) +
           (static_cast<std::int64_t>(c.ffn_hidden) * c.latent_dim + c.latent_dim) +
           4LL * c.latent_dim);
  want += static_cast<std::int64_t>(c.latent_dim) * c.classifier_hidden +
          c.classifier_hidden + c.classifier_hidden + 1;  // classifier
  CHECK(parameter_count(model.parameters()) == want);
}
