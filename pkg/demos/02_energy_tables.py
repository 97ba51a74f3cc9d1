"""Energy saving and efficiency arithmetic on the shipped access/MAC fixtures."""
from neuralfuse import energy
from neuralfuse.energy import ArrayConfig, count_twma
from neuralfuse.generators import GeneratorArch, build_generator

bases, gens, es, mes = energy.energy_tables(r=0.6936)
print("ES (%) from weight-memory accesses")
print(energy.tables_csv(bases, gens, es))
print("ES (%) from MAC counts")
print(energy.tables_csv(bases, gens, mes))

rep = energy.energy_report("ResNet18", "ConvL", rp=48.8)
print("ResNet18 + ConvL:", rep.to_json())

# the analytic counter agrees with the fixtures once a read fetches 8 weights
for fam in ("ConvL", "ConvS"):
    g = build_generator(GeneratorArch(fam)).graph
    print(fam, count_twma(g, ArrayConfig(elems_per_read=8)), energy.load_fixtures()[fam].twma)
