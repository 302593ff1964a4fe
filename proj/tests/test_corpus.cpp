#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "genrec/corpus.hpp"
#include "genrec/io.hpp"

using namespace genrec;

namespace {

std::filesystem::path tmp_dir() {
  static int n = 0;
  auto p = std::filesystem::temp_directory_path() /
           ("genrec_corpus_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
  std::filesystem::create_directories(p);
  return p;
}

Corpus toy_corpus(const std::vector<std::vector<std::int64_t>>& seqs, int n_items,
                  int d = 4) {
  std::vector<Item> items;
  for (int i = 0; i < n_items; ++i) {
    Item it;
    it.id = i;
    it.embedding = VecF::Constant(d, static_cast<float>(i));
    items.push_back(it);
  }
  std::vector<InteractionSequence> ss;
  for (std::size_t u = 0; u < seqs.size(); ++u)
    ss.push_back({static_cast<std::int64_t>(u), seqs[u]});
  return Corpus(std::move(items), std::move(ss));
}

}  // namespace

TEST_CASE("split_sequence arithmetic") {
  std::vector<std::int64_t> items(60);
  for (int i = 0; i < 60; ++i) items[i] = i;

  auto s = split_sequence(items, 50);
  CHECK(s.long_items.size() == 9);
  CHECK(s.short_items.size() == 50);
  CHECK(s.target == 59);

  std::vector<std::int64_t> joined = s.long_items;
  joined.insert(joined.end(), s.short_items.begin(), s.short_items.end());
  joined.push_back(s.target);
  CHECK(joined == items);

  items.resize(30);
  s = split_sequence(items, 50);
  CHECK(s.long_items.empty());
  CHECK(s.short_items.size() == 29);
  CHECK(s.target == 29);

  s = split_sequence(items, 50, 10);
  CHECK(s.target == 10);
  CHECK(s.short_items.size() == 10);
  CHECK(s.long_items.empty());

  CHECK_THROWS_AS(split_sequence(std::vector<std::int64_t>{7}, 50), DataError);
}

TEST_CASE("leave-one-out splits") {
  auto c = toy_corpus({{0, 1, 2, 3, 4}, {0, 1}}, 5);
  auto train = c.examples_for(Split::kTrain);
  auto val = c.examples_for(Split::kValidation);
  auto test = c.examples_for(Split::kTest);

  REQUIRE(test.size() == 2);
  CHECK(test[0].target_pos == 4);
  CHECK(test[1].target_pos == 1);
  REQUIRE(val.size() == 1);
  CHECK(val[0].target_pos == 3);
  REQUIRE(train.size() == 2);
  CHECK(train[0].target_pos == 1);
  CHECK(train[1].target_pos == 2);

  std::map<std::pair<int, int>, int> seen;
  for (const auto& e : c.examples()) seen[{e.seq_index, e.target_pos}]++;
  for (const auto& [k, v] : seen) CHECK(v == 1);
}

TEST_CASE("ingest minimal corpus") {
  auto dir = tmp_dir();
  io::write_file(dir / "emb.txt", "2 2\n10 0.5 -1.5\n11 2 3\n");
  io::write_file(dir / "int.jsonl", "{\"user\":1,\"items\":[10,11]}\n");
  auto c = Corpus::ingest(dir / "emb.txt", dir / "int.jsonl");
  CHECK(c.items().size() == 2);
  CHECK(c.sequences().size() == 1);
  CHECK(c.embedding_dim() == 2);
  CHECK(c.item(10).embedding[1] == -1.5f);
}

TEST_CASE("ingest rejects malformed inputs") {
  auto dir = tmp_dir();
  io::write_file(dir / "int.jsonl", "{\"user\":1,\"items\":[10,11]}\n");

  io::write_file(dir / "bad1.txt", "2\n");
  CHECK_THROWS_AS(Corpus::ingest(dir / "bad1.txt", dir / "int.jsonl"), DataError);

  io::write_file(dir / "bad2.txt", "2 2\n10 0.5 -1.5\n11 2\n");
  CHECK_THROWS_AS(Corpus::ingest(dir / "bad2.txt", dir / "int.jsonl"), DataError);

  io::write_file(dir / "bad3.txt", "2 2\n10 0.5 oops\n11 2 3\n");
  CHECK_THROWS_AS(Corpus::ingest(dir / "bad3.txt", dir / "int.jsonl"), DataError);

  io::write_file(dir / "emb.txt", "2 2\n10 0.5 -1.5\n11 2 3\n");
  io::write_file(dir / "empty.jsonl", "\n");
  CHECK_THROWS_AS(Corpus::ingest(dir / "emb.txt", dir / "empty.jsonl"), DataError);

  io::write_file(dir / "badline.jsonl", "{\"user\":1}\n");
  CHECK_THROWS_AS(Corpus::ingest(dir / "emb.txt", dir / "badline.jsonl"), DataError);
}

TEST_CASE("ingest drops unresolvable and too-short sequences") {
  auto dir = tmp_dir();
  io::write_file(dir / "emb.txt", "1 2\n10 0\n11 1\n");
  io::write_file(dir / "int.jsonl",
                 "{\"user\":1,\"items\":[10,11]}\n"
                 "{\"user\":2,\"items\":[10,99]}\n"
                 "{\"user\":3,\"items\":[10]}\n");
  auto c = Corpus::ingest(dir / "emb.txt", dir / "int.jsonl");
  CHECK(c.sequences().size() == 1);
  CHECK(c.sequences()[0].user_id == 1);
}

TEST_CASE("synthetic corpus round-trips through emit/ingest") {
  SyntheticConfig sc;
  sc.n_users = 100;
  sc.n_items = 10000;
  sc.avg_len = 80;
  sc.n_clusters = 25;
  sc.emb_dim = 8;
  sc.seed = 11;
  auto c = generate_synthetic(sc);
  CHECK(c.items().size() == 10000);

  auto dir = tmp_dir();
  c.emit(dir / "emb.txt", dir / "int.jsonl");
  auto back = Corpus::ingest(dir / "emb.txt", dir / "int.jsonl");
  CHECK(c == back);

  back.emit(dir / "emb2.txt", dir / "int2.jsonl");
  CHECK(io::read_file(dir / "emb.txt") == io::read_file(dir / "emb2.txt"));
  CHECK(io::read_file(dir / "int.jsonl") == io::read_file(dir / "int2.jsonl"));
}

TEST_CASE("synthetic generator is deterministic and seed-sensitive") {
  SyntheticConfig sc;
  sc.n_users = 20;
  sc.n_items = 100;
  sc.avg_len = 40;
  sc.n_clusters = 8;
  sc.emb_dim = 8;
  sc.seed = 3;
  auto a = generate_synthetic(sc);
  auto b = generate_synthetic(sc);
  CHECK(a == b);

  sc.seed = 4;
  auto d = generate_synthetic(sc);
  CHECK_FALSE(a == d);

  sc.n_clusters = 101;
  CHECK_THROWS_AS(generate_synthetic(sc), ConfigError);
}

TEST_CASE("synthetic average length lands near the requested value") {
  SyntheticConfig sc;
  sc.n_users = 300;
  sc.n_items = 400;
  sc.avg_len = 120;
  sc.n_clusters = 10;
  sc.emb_dim = 6;
  sc.seed = 9;
  auto c = generate_synthetic(sc);
  CHECK(c.mean_sequence_length() == doctest::Approx(120.0).epsilon(0.05));
}

namespace {

// Plug-in estimate of I(X;Y) in nats from paired samples.
double mutual_information(const std::vector<int>& xs, const std::vector<int>& ys) {
  std::map<int, double> px, py;
  std::map<std::pair<int, int>, double> pxy;
  const double n = static_cast<double>(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    px[xs[i]] += 1.0 / n;
    py[ys[i]] += 1.0 / n;
    pxy[{xs[i], ys[i]}] += 1.0 / n;
  }
  double mi = 0.0;
  for (const auto& [k, p] : pxy) mi += p * std::log(p / (px[k.first] * py[k.second]));
  return mi;
}

double long_history_target_mi(double strength) {
  SyntheticConfig sc;
  sc.n_users = 400;
  sc.n_items = 200;
  sc.avg_len = 60;
  sc.n_clusters = 4;
  sc.mixture_size = 1;
  sc.long_signal_strength = strength;
  sc.emb_dim = 6;
  sc.seed = 21;
  SyntheticMeta meta;
  auto c = generate_synthetic(sc, &meta);

  std::vector<int> dominant, target;
  for (const auto& seq : c.sequences()) {
    auto s = split_sequence(seq.items, 10);
    if (s.long_items.empty()) continue;
    std::vector<int> hist(meta.n_clusters, 0);
    for (auto id : s.long_items) hist[meta.item_cluster[c.item_index(id)]]++;
    dominant.push_back(static_cast<int>(std::max_element(hist.begin(), hist.end()) -
                                        hist.begin()));
    target.push_back(meta.item_cluster[c.item_index(s.target)]);
  }
  REQUIRE(dominant.size() > 300);
  return mutual_information(dominant, target);
}

}  // namespace

TEST_CASE("planted long-term signal strength controls history/target dependence") {
  const double mi_off = long_history_target_mi(0.0);
  const double mi_on = long_history_target_mi(0.9);
  CHECK(mi_off < 0.05);
  CHECK(mi_on > 0.3);
  CHECK(mi_on > 6.0 * mi_off);
}

TEST_CASE("sequences with empty long part survive into examples") {
  auto c = toy_corpus({{0, 1, 2}}, 3);
  auto test = c.examples_for(Split::kTest);
  REQUIRE(test.size() == 1);
  auto s = split_sequence(c.sequences()[0].items, 50, test[0].target_pos);
  CHECK(s.long_items.empty());
  CHECK(s.short_items.size() == 2);
}
