#include "percdl/percdl.hpp"
int main(){return 0;}
